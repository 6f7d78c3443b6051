import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hc3ldiff.grid import RngStream
from hc3ldiff.schedule import ddim_step, ddpm_step, linear_schedule, make_subsequence, q_sample

from oracles import cumprod_alpha_bar

# exact rational product of (1 - beta_t) for T=1000, 0.002 -> 0.02, rounded to float
ALPHA_BAR_1000 = 1.549834508178703e-05
ALPHA_BAR_500 = 0.038386302894316805


@pytest.fixture(scope="module")
def sched():
    return linear_schedule(1000, 0.002, 0.02)


def test_endpoints(sched):
    assert sched.beta[0] == 0.002
    assert abs(sched.beta[-1] - 0.02) < 1e-15
    assert sched.T == 1000


def test_single_step():
    s = linear_schedule(1, 0.002, 0.002)
    assert s.T == 1 and abs(s.alpha_bar[0] - 0.998) < 1e-15


def test_alpha_bar_vs_sequential_oracle(sched):
    betas, ab = cumprod_alpha_bar(1000, 0.002, 0.02)
    assert np.max(np.abs(sched.beta - betas)) < 1e-15
    assert np.max(np.abs(sched.alpha_bar / ab - 1)) < 1e-12
    assert abs(sched.alpha_bar[-1] / ALPHA_BAR_1000 - 1) < 1e-12
    assert abs(sched.alpha_bar[499] / ALPHA_BAR_500 - 1) < 1e-12


def test_posterior_sigma(sched):
    ab = sched.alpha_bar
    t = np.arange(2, 1001)
    expect = (1 - ab[t - 2]) / (1 - ab[t - 1]) * sched.beta[t - 1]
    assert np.allclose(sched.sigma[1:] ** 2, expect, rtol=1e-12, atol=0)
    assert sched.sigma[0] == 0.0
    beta_mode = linear_schedule(1000, 0.002, 0.02, sigma_mode="beta")
    assert np.allclose(beta_mode.sigma**2, beta_mode.beta)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0), (2.5, 0.1, 0.2)])
def test_bad_schedule(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_q_sample_branches(sched):
    z0 = np.random.default_rng(0).normal(size=(4, 3, 3))
    t = 250
    ab = sched.alpha_bar[t - 1]
    assert np.array_equal(q_sample(z0, t, sched, np.zeros_like(z0)), np.sqrt(ab) * z0)
    eps = np.random.default_rng(1).normal(size=z0.shape)
    assert np.array_equal(q_sample(np.zeros_like(z0), t, sched, eps), np.sqrt(1 - ab) * eps)


def test_q_sample_per_row_t(sched):
    z0 = np.random.default_rng(2).normal(size=(3, 2, 2))
    eps = np.random.default_rng(3).normal(size=z0.shape)
    t = np.array([1, 500, 1000])
    out = q_sample(z0, t, sched, eps)
    for i in range(3):
        assert np.allclose(out[i], q_sample(z0[i], int(t[i]), sched, eps[i]))


def test_q_sample_errors(sched):
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 5, sched, np.zeros(4))
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 0, sched, np.zeros(3))
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 1001, sched, np.zeros(3))


def test_q_sample_moments(sched):
    n = 10_000
    z0 = np.array([0.7, -1.2, 0.0])
    eps = RngStream(5).normal((n, 3))
    samples = q_sample(np.broadcast_to(z0, (n, 3)), 500, sched, eps)
    ab = sched.alpha_bar[499]
    var = 1 - ab
    mean_sigma = np.sqrt(var / n)
    var_sigma = var * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(samples.mean(0) - np.sqrt(ab) * z0) < 4 * mean_sigma)
    assert np.all(np.abs(samples.var(0, ddof=1) - var) < 4 * var_sigma)


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_marginal_matches_iterated_forward(sched, t):
    n = 20_000
    rng = RngStream(9)
    z = np.full(n, 0.8)
    for s in range(1, t + 1):
        b = sched.beta[s - 1]
        z = np.sqrt(1 - b) * z + np.sqrt(b) * rng.normal(n)
    ab = sched.alpha_bar[t - 1]
    var = 1 - ab
    assert abs(z.mean() - np.sqrt(ab) * 0.8) < 4 * np.sqrt(var / n)
    assert abs(z.var(ddof=1) - var) < 4 * var * np.sqrt(2 / (n - 1))


def test_ddpm_t1_deterministic(sched):
    z = np.random.default_rng(4).normal(size=(2, 2))
    e = np.random.default_rng(5).normal(size=(2, 2))
    a = ddpm_step(z, 1, e, sched, RngStream(1))
    r = RngStream(2)
    r.normal(10)
    assert np.array_equal(a, ddpm_step(z, 1, e, sched, r))


def test_ddpm_single_step_inversion():
    s = linear_schedule(1, 0.002, 0.002)
    z0 = np.random.default_rng(6).normal(size=(3, 4))
    eps = np.random.default_rng(7).normal(size=(3, 4))
    z1 = q_sample(z0, 1, s, eps)
    assert np.max(np.abs(ddpm_step(z1, 1, eps, s, None) - z0)) < 1e-10


def test_ddpm_zero(sched):
    assert np.array_equal(ddpm_step(np.zeros(4), 1, np.zeros(4), sched, None), np.zeros(4))


def test_ddpm_adds_noise_after_t1(sched):
    z = np.zeros(1000)
    out = ddpm_step(z, 600, z, sched, RngStream(3))
    assert abs(out.std() - sched.sigma[599]) < 0.1 * sched.sigma[599]


def test_ddim_telescoping(sched):
    z0 = np.random.default_rng(8).normal(size=(4, 2, 2))
    eps = np.random.default_rng(9).normal(size=z0.shape)
    zt = q_sample(z0, 700, sched, eps)
    out = ddim_step(zt, 700, 300, eps, sched)
    assert np.max(np.abs(out - q_sample(z0, 300, sched, eps))) < 1e-10
    assert np.max(np.abs(ddim_step(zt, 700, 0, eps, sched) - z0)) < 1e-10


def test_ddim_zero_and_order(sched):
    assert np.array_equal(ddim_step(np.zeros(3), 10, 5, np.zeros(3), sched), np.zeros(3))
    with pytest.raises(ValueError):
        ddim_step(np.zeros(3), 5, 5, np.zeros(3), sched)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(3), 5, 10, np.zeros(3), sched)


def run_oracle_chain(sched, S, z0, eps):
    """Full DDIM walk with a denoiser that returns the eps consistent with z0 at every step."""
    taus = make_subsequence(sched.T, S)
    z = q_sample(z0, sched.T, sched, eps)
    steps = np.concatenate([[0], taus])
    for cur, prev in zip(steps[::-1][:-1], steps[::-1][1:]):
        ab = sched.alpha_bar_at(cur)
        eps_hat = (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
        z = ddim_step(z, int(cur), int(prev), eps_hat, sched)
    return z


@pytest.mark.parametrize("S", [1, 10, 150])
def test_ddim_chain_reconstructs(sched, S):
    z0 = np.random.default_rng(10).normal(size=(4, 8, 8))
    eps = np.random.default_rng(11).normal(size=z0.shape)
    assert np.max(np.abs(run_oracle_chain(sched, S, z0, eps) - z0)) < 1e-8


def test_subsequences():
    s = make_subsequence(1000, 150)
    assert len(s) == 150 and s[-1] == 1000 and np.all(np.diff(s) > 0) and s[0] >= 1
    assert list(make_subsequence(10, 10)) == list(range(1, 11))
    assert list(make_subsequence(1000, 1)) == [1000]
    assert list(make_subsequence(1000, 20)) == list(range(50, 1001, 50))
    with pytest.raises(ValueError):
        make_subsequence(10, 11)
    with pytest.raises(ValueError):
        make_subsequence(10, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 2000))
def test_subsequence_property(T, S):
    if S > T:
        return
    s = make_subsequence(T, S)
    assert len(s) == S and s[-1] == T and s[0] >= 1 and np.all(np.diff(s) > 0)
    i = np.arange(1, S + 1)
    assert np.all(np.abs(s - i * T / S) <= 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 1500), st.floats(1e-5, 0.2), st.floats(0, 0.5))
def test_schedule_invariants(T, b0, span):
    b1 = min(b0 + span, 0.999)
    s = linear_schedule(T, b0, b1)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0]
    assert np.all(np.isfinite(s.sigma)) and np.all(s.sigma >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**32))
def test_ddim_chain_property(S, seed):
    sched = linear_schedule(1000, 0.002, 0.02)
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(2, 3))
    eps = rng.normal(size=(2, 3))
    assert np.max(np.abs(run_oracle_chain(sched, S, z0, eps) - z0)) < 1e-8
