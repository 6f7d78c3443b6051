import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hc3ldiff.grid import RngStream
from hc3ldiff.nn import AdamW
from hc3ldiff.nn.gradcheck import numerical_gradient, relative_error
from hc3ldiff.ufe import (
    SSIM_C1,
    SSIM_C2,
    UFE,
    Codebook,
    UfeConfig,
    _global_ssim_and_grad,
    nearest_codes,
    quantize,
    quantize_backward,
    quantize_nhwc,
    stage1_loss,
    to_nchw,
    to_nhwc,
    train_ufe,
)

from oracles import nearest_code_bruteforce, ssim_loop

TINY = UfeConfig(base_width=2, codebook_size=16, groups=2)


@pytest.fixture(scope="module")
def tiny():
    return UFE(TINY, RngStream(0)).eval()


def test_encode_shapes(tiny):
    x = np.random.default_rng(0).uniform(-1, 1, (1, 64, 64))
    assert tiny.encode(x).shape == (4, 8, 8)
    assert tiny.encode(np.zeros((1, 384, 384))).shape == (4, 48, 48)
    assert tiny.encode(np.zeros((3, 1, 16, 24))).shape == (3, 4, 2, 3)


def test_encode_deterministic(tiny):
    x = np.random.default_rng(1).uniform(-1, 1, (1, 32, 32))
    assert np.array_equal(tiny.encode(x), tiny.encode(x.copy()))


def test_encode_indivisible(tiny):
    with pytest.raises(ValueError):
        tiny.encode(np.zeros((1, 60, 64)))
    with pytest.raises(ValueError):
        tiny.encode(np.zeros((2, 64, 64)))


def test_decode_shape_and_range(tiny):
    out = tiny.decode(np.zeros((4, 8, 8)))
    assert out.shape == (1, 64, 64)
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) < 1)
    z = tiny.encode(np.random.default_rng(2).uniform(-1, 1, (1, 40, 24)))
    assert tiny.decode(z).shape == (1, 40, 24)


def test_exact_code_match_has_zero_loss():
    cb = Codebook(16, RngStream(0))
    z = cb.params["embedding"][[3, 7, 3, 0]].T.reshape(4, 2, 2)
    q = quantize(z, cb)
    assert list(q.indices.ravel()) == [3, 7, 3, 0]
    assert q.loss == 0.0
    assert np.array_equal(q.z_q, z)


def test_two_candidate_codebook():
    cb = Codebook(2, RngStream(0))
    cb.params["embedding"] = np.array([[0.0] * 4, [1.0] * 4])
    q = quantize(np.full((4, 1, 1), 0.4), cb)
    assert q.indices.ravel()[0] == 0


def test_quantize_matches_bruteforce_k16():
    cb = Codebook(16, RngStream(3))
    cb.params["embedding"] = np.random.default_rng(3).normal(size=(16, 4))
    z = np.random.default_rng(4).normal(size=(4, 6, 5))
    q = quantize(z, cb)
    rows = to_nhwc(z).reshape(-1, 4)
    expect = [nearest_code_bruteforce(r, cb.params["embedding"]) for r in rows]
    assert list(q.indices.ravel()) == expect


def test_quantize_loss_value():
    cb = Codebook(8, RngStream(5))
    z = np.random.default_rng(5).normal(size=(4, 3, 3))
    q = quantize(z, cb, commitment=0.25)
    mse = np.mean((z - q.z_q) ** 2)
    assert abs(q.loss - 1.25 * mse) < 1e-12


def test_quantize_idempotent():
    cb = Codebook(32, RngStream(6))
    z = np.random.default_rng(6).normal(size=(2, 4, 3, 3)) * 0.05
    q1 = quantize(z, cb)
    q2 = quantize(q1.z_q, cb)
    assert np.array_equal(q2.z_q, q1.z_q) and q2.loss == 0.0


def test_straight_through_and_codebook_grad():
    cb = Codebook(4, RngStream(7))
    cb.params["embedding"] = np.random.default_rng(7).normal(size=(4, 4))
    z = np.random.default_rng(8).normal(size=(1, 2, 2, 4))
    q = quantize_nhwc(z, cb, 0.25)
    up = np.random.default_rng(9).normal(size=z.shape)
    cb.zero_grad()
    dz = quantize_backward(z, q.z_q, q.indices, cb, 0.0, up)
    assert np.array_equal(dz, up)  # no commitment: decoder gradient passes through unchanged
    # codebook gradient = d/dE mean||sg(z) - E[idx]||^2
    emb = cb.params["embedding"]
    num = numerical_gradient(lambda: float(np.mean((z.reshape(-1, 4) - emb[q.indices.ravel()]) ** 2)), emb)
    assert relative_error(cb.grads["embedding"], num) < 1e-6


def test_stage1_loss_zero_at_perfect():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 16, 16))
    loss, grad = stage1_loss(x, x.copy(), 0.0)
    assert abs(loss) < 1e-15


def test_stage1_loss_l1_offset():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (2, 1, 8, 8))
    loss, _ = stage1_loss(x, x + 0.1, 0.37, lambda_l1=1.0, lambda_ssim=0.0)
    assert abs(loss - (0.1 + 0.37)) < 1e-12


def test_ssim_matches_loop_oracle():
    r = np.random.default_rng(2)
    a, b = r.uniform(-1, 1, (1, 1, 6, 6)), r.uniform(-1, 1, (1, 1, 6, 6))
    s, _ = _global_ssim_and_grad(a, b, SSIM_C1, SSIM_C2)
    assert abs(s[0] - ssim_loop(a, b, SSIM_C1, SSIM_C2)) < 1e-12


def test_stage1_loss_gradient():
    r = np.random.default_rng(3)
    x = r.uniform(-1, 1, (2, 1, 8, 8))
    rec = x + r.choice([-1, 1], size=x.shape) * r.uniform(0.01, 0.3, x.shape)  # away from the |.| kink
    _, grad = stage1_loss(x, rec, 0.0)
    num = numerical_gradient(lambda: stage1_loss(x, rec, 0.0)[0], rec, h=1e-6)
    assert relative_error(grad, num) < 1e-5


def stage1_surrogate(ufe, x, state):
    """Stage-1 objective with stop-gradients frozen at the base point.

    sg(q - z) and sg(z), sg(q) in the quantization terms are constants, so this
    function is smooth and its gradient is exactly what training back-propagates.
    """
    z = ufe.encoder.forward(x)
    q0, z0, idx0 = state["q0"], state["z0"], state["idx0"]
    x_rec = ufe.decoder.forward(z + (q0 - z0))
    emb = ufe.codebook.params["embedding"]
    qe = emb[idx0.ravel()].reshape(z.shape)
    quant = float(np.mean((z0 - qe) ** 2) + ufe.cfg.commitment * np.mean((z - q0) ** 2))
    return stage1_loss(x, x_rec, quant, ufe.cfg.lambda_l1, ufe.cfg.lambda_ssim)[0]


def stage1_gradient_error(seed=11):
    """Worst relative error between back-propagated and finite-difference stage-1 gradients."""
    ufe = UFE(TINY, RngStream(seed)).train()
    r = np.random.default_rng(seed)
    for m in ufe.modules().values():
        for _, layer, key in m.named_parameters():
            layer.params[key] = layer.params[key] + 0.2 * r.normal(size=layer.params[key].shape)
    n_params = sum(m.num_parameters() for m in ufe.modules().values())
    assert n_params <= 5000
    x = r.uniform(-1, 1, (2, 16, 16, 1))
    z = ufe.encoder.forward(x)
    q = quantize_nhwc(z, ufe.codebook, ufe.cfg.commitment)
    state = {"q0": q.z_q.copy(), "z0": z.copy(), "idx0": q.indices.copy()}
    for m in ufe.modules().values():
        m.zero_grad()
    rec = ufe.decoder.forward(q.z_q)
    loss, g = stage1_loss(x, rec, q.loss)
    assert abs(loss - stage1_surrogate(ufe, x, state)) < 1e-12
    dz = quantize_backward(z, q.z_q, q.indices, ufe.codebook, ufe.cfg.commitment, ufe.decoder.backward(g))
    ufe.encoder.backward(dz)
    worst = 0.0
    for name, m in ufe.modules().items():
        for pname, layer, key in m.named_parameters():
            p = layer.params[key]
            sel = r.choice(p.size, size=min(p.size, 6), replace=False)
            num = numerical_gradient(lambda: stage1_surrogate(ufe, x, state), p, 1e-5, sel)
            err = relative_error(layer.grads[key].ravel()[sel], num.ravel()[sel])
            worst = max(worst, err)
    return worst


def test_composed_stage1_gradients():
    assert stage1_gradient_error() < 1e-4


def test_state_dict_roundtrip():
    a = UFE(TINY, RngStream(1))
    a.latent_scale = 1.7
    sd = a.state_dict()
    assert any(k.startswith("encoder.") for k in sd) and "codebook.0.embedding" in sd
    b = UFE(TINY, RngStream(2))
    b.load_state_dict(sd)
    assert b.trained and b.latent_scale == 1.7
    x = np.random.default_rng(0).uniform(-1, 1, (1, 16, 16))
    assert np.array_equal(a.eval().reconstruct(x), b.eval().reconstruct(x))


def test_untrained_requires():
    from hc3ldiff.errors import StateError

    with pytest.raises(StateError):
        UFE(TINY, RngStream(1)).require_trained()


def test_training_reduces_loss():
    r = np.random.default_rng(0)
    imgs = np.tanh(r.normal(size=(2, 16, 16, 16)).cumsum(axis=-1) * 0.2)
    ufe = UFE(TINY, RngStream(3))
    hist = train_ufe(ufe, imgs, 6, 8, RngStream(4), lambda: AdamW(lr=3e-3))
    assert len(hist) == 12
    assert np.mean([h["loss"] for h in hist[-3:]]) < np.mean([h["loss"] for h in hist[:3]])
    assert ufe.trained


def test_training_deterministic():
    imgs = np.random.default_rng(1).uniform(-1, 1, (1, 8, 16, 16))
    outs = []
    for _ in range(2):
        ufe = UFE(TINY, RngStream(3))
        train_ufe(ufe, imgs, 2, 4, RngStream(4), lambda: AdamW(lr=1e-3))
        outs.append(ufe.state_dict())
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_layout_helpers_inverse():
    z = np.random.default_rng(0).normal(size=(2, 4, 3, 5))
    assert np.array_equal(to_nchw(to_nhwc(z)), z)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(1, 40), st.integers(0, 2**31))
def test_nearest_codes_property(k, n, seed):
    r = np.random.default_rng(seed)
    emb = r.normal(size=(k, 4))
    rows = r.normal(size=(n, 4))
    got = nearest_codes(rows, emb)
    d = ((rows[:, None, :] - emb[None]) ** 2).sum(-1)
    # chosen entry is within round-off of the true minimum distance
    assert np.all(d[np.arange(n), got] <= d.min(axis=1) + 1e-12)
