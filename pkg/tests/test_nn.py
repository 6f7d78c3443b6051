import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hc3ldiff.errors import StateError
from hc3ldiff.grid import RngStream
from hc3ldiff.nn import (
    AdamW,
    ChannelConcat,
    Conv2d,
    Dense,
    GroupNorm,
    ResBlock,
    ResidualAdd,
    SiLU,
    Tanh,
    TimeEmbedInject,
    TimeMLP,
    Upsample2x,
    adamw_update,
    check_module,
    time_embedding,
)

GRAD_TOL = 1e-5


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def perturb_params(module, seed=1, scale=0.3):
    # move norm affines / zero biases away from their init so every gradient path is exercised
    r = np.random.default_rng(seed)
    for _, layer, key in module.named_parameters():
        layer.params[key] = layer.params[key] + scale * r.normal(size=layer.params[key].shape)
    return module


def test_silu_at_zero():
    s = SiLU().train()
    assert s.forward(np.zeros(1))[0] == 0.0
    assert s.backward(np.ones(1))[0] == 0.5


def test_conv_delta_kernel_is_identity():
    c = Conv2d(3, 3, RngStream(0))
    w = np.zeros((3, 3, 3, 3))
    for i in range(3):
        w[1, 1, i, i] = 1.0
    c.params["weight"] = w
    x = rand(2, 5, 6, 3)
    assert np.array_equal(c.forward(x), x)


def test_conv_matches_direct_loop():
    c = perturb_params(Conv2d(2, 3, RngStream(1), stride=2))
    x = rand(1, 5, 5, 2)
    y = c.forward(x)
    w, b = c.params["weight"], c.params["bias"]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    assert y.shape == (1, 3, 3, 3)
    for i in range(3):
        for j in range(3):
            for o in range(3):
                ref = b[o] + sum(
                    xp[0, 2 * i + a, 2 * j + d, ci] * w[a, d, ci, o] for a in range(3) for d in range(3) for ci in range(2)
                )
                assert abs(y[0, i, j, o] - ref) < 1e-12


def test_backward_before_forward_is_state_error():
    for layer in (Conv2d(1, 1, RngStream(0)), SiLU(), GroupNorm(4, 2), Dense(2, 2, RngStream(0)), Upsample2x()):
        layer.train()
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 2, 2, 1)))


def test_backward_in_eval_mode_is_state_error():
    s = SiLU().eval()
    s.forward(np.ones(3))
    with pytest.raises(StateError):
        s.backward(np.ones(3))


LAYER_CASES = {
    "conv3x3_s1": lambda: (perturb_params(Conv2d(2, 3, RngStream(2))), [rand(2, 4, 5, 2)]),
    "conv3x3_s2": lambda: (perturb_params(Conv2d(2, 3, RngStream(3), stride=2)), [rand(1, 6, 5, 2)]),
    "conv1x1": lambda: (perturb_params(Conv2d(3, 2, RngStream(4), k=1)), [rand(2, 3, 3, 3)]),
    "upsample": lambda: (Upsample2x(), [rand(2, 3, 2, 2)]),
    "silu": lambda: (SiLU(), [rand(3, 4)]),
    "tanh": lambda: (Tanh(), [rand(3, 4)]),
    "group_norm": lambda: (perturb_params(GroupNorm(6, 3)), [rand(2, 3, 3, 6)]),
    "dense": lambda: (perturb_params(Dense(5, 3, RngStream(5))), [rand(4, 5)]),
    "residual_add": lambda: (ResidualAdd(), [rand(2, 3, 3, 2), rand(2, 3, 3, 2, seed=1)]),
    "channel_concat": lambda: (ChannelConcat(), [rand(2, 3, 3, 2), rand(2, 3, 3, 3, seed=1)]),
    "time_embed_inject": lambda: (TimeEmbedInject(), [rand(2, 3, 3, 4), rand(2, 4, seed=1)]),
    "resblock": lambda: (perturb_params(ResBlock(4, 4, RngStream(6), groups=2)), [rand(2, 4, 4, 4)]),
    "resblock_proj_temb": lambda: (
        perturb_params(ResBlock(2, 4, RngStream(7), temb_dim=6, groups=2)),
        [rand(2, 4, 4, 2), rand(2, 6, seed=3)],
    ),
    "time_mlp": lambda: (perturb_params(TimeMLP(4, 6, RngStream(8))), [rand(3, 4)]),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients(kind):
    module, inputs = LAYER_CASES[kind]()
    assert module.num_parameters() <= 5000
    errors = check_module(module, inputs, h=1e-5)
    assert errors and max(errors.values()) < GRAD_TOL, errors


def test_group_norm_statistics():
    gn = GroupNorm(8, 4)
    x = rand(3, 5, 5, 8) * 4 + 2
    xhat, _ = gn.normalize(x)
    g = xhat.reshape(3, 25, 4, 2)
    assert np.max(np.abs(g.mean(axis=(1, 3)))) < 1e-6
    # eps=1e-5 shrinks the variance by about eps/var = 6e-7 here
    assert np.max(np.abs(g.var(axis=(1, 3)) - 1)) < 1e-6


def test_group_norm_statistics_without_eps():
    gn = GroupNorm(8, 4, eps=0.0)
    x = rand(2, 4, 4, 8) * 3 - 1
    g = gn.normalize(x)[0].reshape(2, 16, 4, 2)
    assert np.max(np.abs(g.mean(axis=(1, 3)))) < 1e-6
    assert np.max(np.abs(g.var(axis=(1, 3)) - 1)) < 1e-6


def test_upsample_then_avgpool_identity():
    x = rand(2, 3, 4, 5)
    y = Upsample2x().forward(x)
    pooled = y.reshape(2, 3, 2, 4, 2, 5).mean(axis=(2, 4))
    assert np.array_equal(pooled, x)


def test_concat_backward_splits_exactly():
    cc = ChannelConcat().train()
    a, b = rand(1, 2, 2, 3), rand(1, 2, 2, 1, seed=2)
    cc.forward(a, b)
    ga, gb = rand(1, 2, 2, 3, seed=3), rand(1, 2, 2, 1, seed=4)
    da, db = cc.backward(np.concatenate([ga, gb], axis=-1))
    assert np.array_equal(da, ga) and np.array_equal(db, gb)


def test_time_embedding_values():
    e = time_embedding(1, 4)
    w = 10000 ** (-0.5)
    assert np.allclose(e, [math.sin(1), math.cos(1), math.sin(w), math.cos(w)], atol=1e-15, rtol=0)
    z = time_embedding(0, 6)
    assert np.array_equal(z[0::2], np.zeros(3)) and np.array_equal(z[1::2], np.ones(3))
    with pytest.raises(ValueError):
        time_embedding(3, 5)


def test_time_embedding_vector_and_distinct():
    e = time_embedding(np.arange(1, 1001), 128)
    assert e.shape == (1000, 128)
    assert np.all(np.linalg.norm(e[1:] - e[:-1], axis=1) > 0)
    assert np.linalg.norm(e[0] - e[999]) > 0


def test_adamw_null_update():
    opt = AdamW(lr=0.1, weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    out = opt.update(p, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], p["w"])


def test_adamw_first_step():
    opt = AdamW(lr=0.1, beta1=0.9, beta2=0.999, weight_decay=0.0)
    out = adamw_update(opt, {"w": np.array(0.5)}, {"w": np.array(1.0)})
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    assert abs((out["w"] - 0.5) - (-0.1)) < 1e-9
    assert abs((out["w"] - 0.5) - (-0.1 / (1 + 1e-8))) < 1e-15


def test_adamw_pure_decay():
    opt = AdamW(lr=0.1, weight_decay=0.01)
    out = opt.update({"w": np.array(1.0)}, {"w": np.array(0.0)})
    assert abs(out["w"] - 0.999) < 1e-15


def test_adamw_matches_hand_loop():
    r = np.random.default_rng(0)
    grads = r.normal(size=(5, 3))
    opt = AdamW(lr=0.01, weight_decay=0.02)
    p = {"w": np.ones(3)}
    ref = np.ones(3)
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p = opt.update(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * 0.02 * ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=0, atol=1e-14)
    assert opt.step_count == 5


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        AdamW().update({"w": np.zeros(3)}, {"w": np.zeros(4)})


def test_state_dict_names_and_roundtrip():
    blk = ResBlock(2, 4, RngStream(0), temb_dim=4, groups=2)
    sd = blk.state_dict()
    assert all(name.split(".")[0].isdigit() for name in sd)
    other = ResBlock(2, 4, RngStream(99), temb_dim=4, groups=2)
    other.load_state_dict({k: v.copy() for k, v in sd.items()})
    x, t = rand(1, 3, 3, 2), rand(1, 4)
    assert np.array_equal(blk.eval().forward(x, t), other.eval().forward(x, t))
    with pytest.raises(ValueError):
        other.load_state_dict({k: v for k, v in list(sd.items())[1:]})


def test_param_grad_shapes_match():
    blk = perturb_params(ResBlock(2, 4, RngStream(1), temb_dim=4, groups=2)).train()
    blk.forward(rand(2, 4, 4, 2), rand(2, 4))
    blk.backward(rand(2, 4, 4, 4))
    for name, layer, key in blk.named_parameters():
        assert layer.grads[key].shape == layer.params[key].shape, name


def test_he_init_statistics():
    c = Conv2d(16, 32, RngStream(5))
    w = c.params["weight"]
    assert abs(w.std() - math.sqrt(2 / (16 * 9))) < 0.1 * math.sqrt(2 / (16 * 9))
    assert np.array_equal(c.params["bias"], np.zeros(32))
    assert np.array_equal(Conv2d(4, 4, RngStream(5), zero_init=True).params["weight"], np.zeros((3, 3, 4, 4)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]), st.integers(2, 6), st.integers(0, 1000))
def test_conv_gradient_property(cin, cout, stride, size, seed):
    conv = perturb_params(Conv2d(cin, cout, RngStream(seed), stride=stride), seed=seed)
    errors = check_module(conv, [rand(1, size, size + 1, cin, seed=seed)])
    assert max(errors.values()) < GRAD_TOL
