import math

import numpy as np
import pytest
from scipy.special import ndtr

from gm_dgm import autodiff as ad
from gm_dgm import distributions as dist
from gm_dgm.errors import ContractError, DimensionError, DomainError
from gm_dgm.selftest import kl_monte_carlo, stratified_normal


def gaussian(mu, log_var):
    return dist.DiagGaussian(ad.Tensor(np.atleast_2d(mu)), ad.Tensor(np.atleast_2d(log_var)))


def test_kl_of_identical_gaussians_is_zero():
    g = gaussian([0.3, -1.0], [0.5, -0.2])
    assert np.array_equal(dist.gaussian_kl(g, g).data, [0.0])


def test_kl_unit_shift_is_one_half():
    q = gaussian([1.0], [0.0])
    p = gaussian([0.0], [0.0])
    assert np.isclose(dist.gaussian_kl(q, p).data[0], 0.5)


def test_kl_is_non_negative():
    rng = np.random.default_rng(0)
    q = gaussian(rng.standard_normal((20, 4)), rng.uniform(-2, 2, (20, 4)))
    p = gaussian(rng.standard_normal((20, 4)), rng.uniform(-2, 2, (20, 4)))
    assert np.all(dist.gaussian_kl(q, p).data >= 0)


def test_kl_matches_monte_carlo_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        mu_q, mu_p = rng.standard_normal(d), rng.standard_normal(d)
        lv_q, lv_p = rng.uniform(-1.5, 1.5, d), rng.uniform(-1.5, 1.5, d)
        closed = dist.gaussian_kl(gaussian(mu_q, lv_q), gaussian(mu_p, lv_p)).data[0]
        estimate, stderr = kl_monte_carlo(mu_q, lv_q, mu_p, lv_p, 100_000, rng)
        assert abs(estimate - closed) < 3 * stderr, (mu_q, lv_q, mu_p, lv_p)


def test_stratified_normal_puts_one_draw_in_each_stratum():
    eps = stratified_normal(1000, 3, np.random.default_rng(0))
    strata = np.floor(ndtr(eps) * 1000).astype(int)
    for column in strata.T:
        assert np.array_equal(np.sort(column), np.arange(1000))


def test_standard_normal_log_prob_at_origin():
    g = gaussian(np.zeros(3), np.zeros(3))
    assert np.isclose(dist.gaussian_log_prob(g, np.zeros((1, 3))).data[0], -1.5 * math.log(2 * math.pi))


def test_reparam_sample_shape_check():
    g = gaussian(np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionError):
        dist.reparam_sample(g, np.zeros((1, 4)))


def test_reparam_sample_with_zero_noise_returns_mean():
    g = gaussian([1.0, 2.0], [3.0, -3.0])
    assert np.array_equal(dist.reparam_sample(g, np.zeros((1, 2))).data, [[1.0, 2.0]])


def test_log_variance_is_clamped():
    g = dist.DiagGaussian.from_raw(ad.Tensor([[0.0, 0.0]]), ad.Tensor([[-50.0, 50.0]]))
    assert np.array_equal(g.log_var.data, [[-10.0, 10.0]])


def test_bernoulli_log_prob_accepts_grey_levels_and_clamps_means():
    b = dist.BernoulliVec(ad.Tensor([[0.0, 1.0, 0.5]]))
    lp = dist.bernoulli_log_prob(b, np.array([[0.0, 1.0, 0.25]])).data[0]
    assert np.isfinite(lp)
    assert np.isclose(lp, 2 * math.log(1 - 1e-7) + math.log(0.5), atol=1e-9)


def test_bernoulli_targets_outside_unit_interval_are_rejected():
    b = dist.BernoulliVec(ad.Tensor([[0.5]]))
    with pytest.raises(DomainError):
        dist.bernoulli_log_prob(b, np.array([[1.5]]))


def test_uniform_categorical_entropy_is_log_k():
    c = dist.Categorical.from_probs(np.full((2, 4), 0.25))
    assert np.allclose(dist.categorical_entropy(c).data, math.log(4))


def test_zero_probabilities_contribute_nothing_to_entropy():
    c = dist.Categorical.from_probs(np.array([[1.0, 0.0, 0.0]]))
    assert c.log_probs.data[0, 1] == dist.LOG_ZERO
    assert np.isclose(dist.categorical_entropy(c).data[0], 0.0)


def test_cross_entropy_picks_the_observed_class():
    c = dist.Categorical.from_probs(np.array([[0.2, 0.8]]))
    ce = dist.categorical_cross_entropy(c, np.array([[0.0, 1.0]]))
    assert np.isclose(ce.data[0], -math.log(0.8))


def test_cross_entropy_needs_one_hot_targets():
    c = dist.Categorical.from_probs(np.array([[0.2, 0.8]]))
    with pytest.raises(ContractError):
        dist.categorical_cross_entropy(c, np.array([[0.5, 0.5]]))
