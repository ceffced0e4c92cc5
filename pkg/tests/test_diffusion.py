import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdflow.config import DenoiserConfig
from crowdflow.diffusion import (Denoiser, ddim_timesteps, forward_sample, make_schedule, posterior, sample_ddim,
                                 sample_ddpm)
from crowdflow.nn import make_rng


def iterate_chain(y0, k, schedule, rng):
    """Apply the one-step noising kernel k times."""
    y = y0
    for j in range(1, k + 1):
        b = schedule.beta(j)
        y = np.sqrt(1 - b) * y + np.sqrt(b) * rng.standard_normal(y.shape)
    return y


def test_alpha_bar_matches_direct_product():
    s = make_schedule(70, 1e-4, 0.05)
    prod = 1.0
    for j in range(70):
        prod *= 1.0 - (1e-4 + j * (0.05 - 1e-4) / 69)
    assert s.alpha_bar(70) == pytest.approx(prod, rel=1e-13)
    assert s.alpha_bar(0) == 1.0
    assert make_schedule(1, 0.02, 0.02).alpha_bar(1) == pytest.approx(0.98)


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.1, 0.01)
    with pytest.raises(ValueError):
        make_schedule(10, shape="sigmoid")
    cos = make_schedule(70, 1e-4, 0.05, "cosine")
    assert np.all(np.diff(cos.alpha_bars) < 0)


@pytest.mark.parametrize("k", [1, 35, 70])
def test_closed_form_marginal_matches_chain(k):
    s = make_schedule(70)
    y0 = np.tile([3.0, -2.0], (100_000, 1))
    chain = iterate_chain(y0, k, s, make_rng(0, k))
    closed, _ = forward_sample(y0, k, s, make_rng(1, k))
    mean = np.sqrt(s.alpha_bar(k)) * y0[0]
    var = 1 - s.alpha_bar(k)
    for sample in (chain, closed):
        np.testing.assert_allclose(sample.mean(axis=0), mean, rtol=0.01)
        # both coordinates share the variance, so pool them
        assert (sample - sample.mean(axis=0)).var() == pytest.approx(var, rel=0.01)
    np.testing.assert_allclose(chain.mean(axis=0), closed.mean(axis=0), rtol=0.01)
    assert chain.var() == pytest.approx(closed.var(), rel=0.01)


def test_noiseless_chain_keeps_y0():
    s = make_schedule(5, 1e-4, 1e-4)
    object.__setattr__(s, "betas", np.zeros(5))
    y0 = np.array([[1.0, 2.0]])
    y, _ = forward_sample(y0, 5, s, make_rng(0))
    np.testing.assert_array_equal(y, y0)


def test_forward_sample_vector_steps_and_range():
    s = make_schedule(70)
    y, eps = forward_sample(np.ones((3, 2)), np.array([1, 10, 70]), s, make_rng(0))
    ab = s.alpha_bar(np.array([1, 10, 70]))[:, None]
    np.testing.assert_allclose(y, np.sqrt(ab) + np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        forward_sample(np.ones((1, 2)), 0, s, make_rng(0))
    with pytest.raises(ValueError):
        forward_sample(np.ones((1, 2)), 71, s, make_rng(0))


def test_ddim_timesteps():
    steps = ddim_timesteps(70, 50)
    assert len(steps) == 50 and steps[0] == 70 and steps[-1] == 1
    assert np.all(np.diff(steps) < 0)
    assert ddim_timesteps(70, 1).tolist() == [70]
    with pytest.raises(ValueError):
        ddim_timesteps(70, 71)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_samplers_return_constant_oracle_exactly(a, b, seed):
    target = np.array([a, b])
    s = make_schedule(70)
    oracle = lambda y, k: np.broadcast_to(target, y.shape)
    np.testing.assert_array_equal(sample_ddim(oracle, 3, s, 50, make_rng(seed)), np.tile(target, (3, 1)))
    # the last posterior coefficient is 1 up to the rounding of beta_1 / (1 - (1 - beta_1))
    np.testing.assert_allclose(sample_ddpm(oracle, 3, s, make_rng(seed)), np.tile(target, (3, 1)), rtol=1e-12, atol=1e-12)


def test_ddim_inversion_with_exact_oracle():
    # the oracle knows y0; DDIM must land on it to machine precision from any start
    s = make_schedule(70)
    y0 = make_rng(3).normal(size=(5, 2))
    out = sample_ddim(lambda y, k: y0, 5, s, 50, make_rng(4))
    np.testing.assert_allclose(out, y0, rtol=0, atol=1e-14)
    # an eps-consistent oracle that recovers y0 from y_k for a deterministic trajectory
    yK, eps = forward_sample(y0, 70, s, make_rng(5))

    def recover(y, k):
        ab = s.alpha_bar(k)
        return (y - np.sqrt(1 - ab) * eps) / np.sqrt(ab)

    steps = ddim_timesteps(70, 50)
    y = yK
    for idx, k in enumerate(steps):
        prev = int(steps[idx + 1]) if idx + 1 < len(steps) else 0
        y0_hat = recover(y, int(k))
        ab, ab_prev = s.alpha_bar(k), s.alpha_bar(prev)
        y = np.sqrt(ab_prev) * y0_hat + np.sqrt(1 - ab_prev) * (y - np.sqrt(ab) * y0_hat) / np.sqrt(1 - ab)
    np.testing.assert_allclose(y, y0, atol=1e-12)


def test_single_step_posterior_mean_is_y0_hat():
    s = make_schedule(1, 0.3, 0.3)
    mean, var = posterior(s, 1, np.array([5.0, -1.0]), np.array([0.2, 0.4]))
    np.testing.assert_allclose(mean, [0.2, 0.4])
    assert var == 0.0


def test_ddpm_seed_determinism():
    s = make_schedule(70)
    f = lambda y, k: 0.5 * y
    np.testing.assert_array_equal(sample_ddpm(f, 4, s, make_rng(9)), sample_ddpm(f, 4, s, make_rng(9)))


def _gaussian_oracle(sch, m, s0):
    # exact denoiser for data y0 ~ N(m, s0^2 I): E[y0 | y_k] in closed form
    def oracle(y, k):
        ab = sch.alpha_bar(k)
        var_y = ab * s0 ** 2 + (1 - ab)
        return m + np.sqrt(ab) * s0 ** 2 / var_y * (y - np.sqrt(ab) * m)
    return oracle


M, S0 = np.array([0.8, -0.3]), 0.4


def test_ddim50_and_ddpm70_agree_for_exact_denoiser():
    # the schedule must end near pure noise for the N(0, I) start to be the right prior
    sch = make_schedule(70, 1e-4, 0.2)
    oracle = _gaussian_oracle(sch, M, S0)
    a = sample_ddim(oracle, 20_000, sch, 50, make_rng(1))
    b = sample_ddpm(oracle, 20_000, sch, make_rng(2))
    np.testing.assert_allclose(a.mean(axis=0), b.mean(axis=0), atol=0.02)
    np.testing.assert_allclose(a.std(axis=0), b.std(axis=0), rtol=0.05)


def test_samplers_recover_gaussian_target_on_fine_schedule():
    # 70 coarse steps shrink the spread by a few percent; a fine schedule removes that bias
    sch = make_schedule(1000, 1e-4, 0.02)
    oracle = _gaussian_oracle(sch, M, S0)
    for x in (sample_ddim(oracle, 20_000, sch, 200, make_rng(1)), sample_ddpm(oracle, 20_000, sch, make_rng(2))):
        np.testing.assert_allclose(x.mean(axis=0), M, atol=0.01)
        np.testing.assert_allclose(x.std(axis=0), S0, rtol=0.03)


def _denoiser():
    return Denoiser(DenoiserConfig(width=4, depth=2, time_dim=4, cond_dim=3), 5, make_rng(0))


def test_denoiser_zero_params_and_determinism():
    net = _denoiser()
    y, c = make_rng(1).normal(size=(3, 2)), make_rng(2).normal(size=(3, 5))
    np.testing.assert_array_equal(net(y, 7, c).data, net(y, 7, c).data)
    for _, p in net.named_parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(net(y, np.array([1, 2, 3]), c).data, 0.0)


def test_denoiser_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        _denoiser()(np.array([[np.nan, 0.0]]), 1, np.zeros((1, 5)))
