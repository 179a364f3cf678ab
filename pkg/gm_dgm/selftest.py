"""
Fast invariant checks run by `gm_dgm selftest`.

Each check builds tiny 64-bit problems from a seeded generator, so the whole
suite takes seconds and is deterministic for a given seed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from . import distributions as dist
from . import evaluation, gradcheck, models
from .data import build_prior
from .models import Likelihood, ModelArchitecture, ModelKind
from .utils import status

GRADIENT_TOLERANCE = 1e-5
MARGINAL_TOLERANCE = 1e-12
CH_TOLERANCE = 1e-9
MC_SAMPLES = 100_000
KL_PAIRS = 10
MARGINAL_MODELS = 10
CH_INSTANCES = 10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _toy_model(kind, rng, x_dim=6, k=3, z_dim=2, width=6):
    arch = ModelArchitecture(kind, Likelihood.BERNOULLI, x_dim, k, z_dim=z_dim, hidden_width=width, n_layers=2)
    prior = build_prior(2, 1, 0.3, 0.4)
    return models.init_model(arch, prior, rng, np.float64)


def check_autodiff_gradients(rng):
    a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
    b = ad.Tensor(rng.standard_normal((4,)), requires_grad=True, name="b")
    c = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, name="c")

    def fn():
        h = ad.sigmoid(a * b) + ad.softplus(a) / c - ad.log(c) * ad.exp(b * 0.1)
        return ad.tensor_sum(ad.log_softmax(h) * ad.square(a)) + ad.mean(ad.relu(h + 0.3))

    result = gradcheck.check_gradients(fn, [a, b, c])
    return CheckResult("autodiff_gradients", result.passed(GRADIENT_TOLERANCE),
                       f"max relative error {result.max_relative_error:.2e}")


def check_log_softmax(rng):
    logits = ad.Tensor(rng.standard_normal((7, 5)) * 30.0)
    with ad.no_grad():
        sums = np.exp(ad.log_softmax(logits).data).sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    return CheckResult("log_softmax_normalised", worst < 1e-12, f"max |sum - 1| {worst:.2e}")


def stratified_normal(n, d, rng):
    """N(0, I) draws with one point in each of n equal-probability strata per dimension."""
    u = (np.argsort(rng.random((n, d)), axis=0) + rng.random((n, d))) / n
    return ndtri(np.clip(u, 1e-300, None))


def _log_density(z, mu, log_var):
    return -0.5 * np.sum(np.log(2.0 * np.pi) + log_var + (z - mu) ** 2 / np.exp(log_var), axis=-1)


def kl_monte_carlo(mu_q, log_var_q, mu_p, log_var_p, n_samples, rng):
    """Sample estimate of KL(q || p) for one pair of diagonal Gaussians; returns (estimate, standard error)."""
    eps = stratified_normal(n_samples, mu_q.size, rng)
    z = mu_q + np.exp(0.5 * log_var_q) * eps
    log_ratio = _log_density(z, mu_q, log_var_q) - _log_density(z, mu_p, log_var_p)
    return float(log_ratio.mean()), float(log_ratio.std() / np.sqrt(n_samples))


def check_kl_monte_carlo(rng, n_pairs=KL_PAIRS, d=3):
    worst = 0.0
    for _ in range(n_pairs):
        mu_q, mu_p = rng.standard_normal(d), rng.standard_normal(d)
        lv_q, lv_p = rng.uniform(-1, 1, d), rng.uniform(-1, 1, d)
        q = dist.DiagGaussian(ad.Tensor(mu_q[None]), ad.Tensor(lv_q[None]))
        p = dist.DiagGaussian(ad.Tensor(mu_p[None]), ad.Tensor(lv_p[None]))
        with ad.no_grad():
            closed = float(dist.gaussian_kl(q, p).data[0])
        estimate, stderr = kl_monte_carlo(mu_q, lv_q, mu_p, lv_p, MC_SAMPLES, rng)
        worst = max(worst, abs(estimate - closed) / max(stderr, 1e-12))
    return CheckResult("kl_closed_form_vs_monte_carlo", worst < 3.0,
                       f"{n_pairs} pairs, worst deviation {worst:.2f} standard errors")


def check_marginalisation(rng, n_models=MARGINAL_MODELS):
    worst = 0.0
    for i in range(n_models):
        params = _toy_model(ModelKind.GMDGM if i % 2 else ModelKind.M2, rng)
        x = rng.uniform(0, 1, (4, params.arch.x_dim))
        eps = rng.standard_normal((4, params.arch.z_dim))
        with ad.no_grad():
            marginal = models.elbo_unlabelled(params, x, eps).data
            q = models.q_y_given_x(params, x)
            manual = -np.sum(q.probs * q.log_probs.data, axis=1)
            for c in range(params.arch.k_total):
                y = np.full(x.shape[0], c)
                manual = manual + q.probs[:, c] * models.elbo_labelled(params, x, y, eps).data
        worst = max(worst, float(np.max(np.abs(marginal - manual))))
    return CheckResult("marginalisation_identity", worst < MARGINAL_TOLERANCE,
                       f"{n_models} models, max deviation {worst:.2e}")


def check_total_loss_gradients(kind, rng):
    params = _toy_model(kind, rng)
    x_l = rng.uniform(0, 1, (3, params.arch.x_dim))
    y_l = np.array([0, 1, 0])
    x_u = rng.uniform(0, 1, (4, params.arch.x_dim))
    eps_l = rng.standard_normal((3, params.arch.z_dim))
    eps_u = rng.standard_normal((4, params.arch.z_dim))

    def fn():
        return models.total_loss(params, (x_l, y_l), x_u, 0.7, 1e-2, eps_labelled=eps_l, eps_unlabelled=eps_u)

    result = gradcheck.check_gradients(fn, params.parameters())
    worst = max(result.per_parameter, key=result.per_parameter.get)
    return CheckResult(f"total_loss_gradients_{kind.value}", result.passed(GRADIENT_TOLERANCE),
                       f"max relative error {result.max_relative_error:.2e} ({worst})")


def random_clustering(rng, max_points=30, max_clusters=4, d=3):
    """Random points with 2..max_clusters non-empty clusters and more points than clusters."""
    k = int(rng.integers(2, max_clusters + 1))
    n = int(rng.integers(k + 1, max_points + 1))
    ids = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, n - k)]))
    return rng.standard_normal((n, d)), ids


def brute_force_calinski_harabasz(points, ids):
    """[between-cluster dispersion / (k - 1)] / [within-cluster dispersion / (N - k)], term by term."""
    centre = points.mean(axis=0)
    labels = np.unique(ids)
    between = within = 0.0
    for c in labels:
        members = points[ids == c]
        mean_c = members.mean(axis=0)
        between += members.shape[0] * np.sum((mean_c - centre) ** 2)
        within += np.sum((members - mean_c) ** 2)
    n, k = points.shape[0], labels.size
    return (between / (k - 1)) / (within / (n - k))


def check_calinski_harabasz(rng, n_instances=CH_INSTANCES):
    worst = 0.0
    for _ in range(n_instances):
        points, ids = random_clustering(rng)
        expected = brute_force_calinski_harabasz(points, ids)
        score = evaluation.calinski_harabasz(points, ids)
        worst = max(worst, abs(score - expected) / max(1.0, abs(expected)))
    return CheckResult("calinski_harabasz_oracle", worst < CH_TOLERANCE,
                       f"{n_instances} instances, max relative deviation {worst:.2e}")


def run_selftest(seed=0):
    """Run every check; returns a list of CheckResult (one per check)."""
    seeds = np.random.SeedSequence(seed).spawn(7)
    rngs = [np.random.default_rng(s) for s in seeds]
    checks = [
        ("autodiff_gradients", lambda: check_autodiff_gradients(rngs[0])),
        ("log_softmax_normalised", lambda: check_log_softmax(rngs[1])),
        ("kl_closed_form_vs_monte_carlo", lambda: check_kl_monte_carlo(rngs[2])),
        ("marginalisation_identity", lambda: check_marginalisation(rngs[3])),
        ("total_loss_gradients_m2", lambda: check_total_loss_gradients(ModelKind.M2, rngs[4])),
        ("total_loss_gradients_gmdgm", lambda: check_total_loss_gradients(ModelKind.GMDGM, rngs[5])),
        ("calinski_harabasz_oracle", lambda: check_calinski_harabasz(rngs[6])),
    ]
    results = []
    for name, check in checks:
        try:
            results.append(check())
        except Exception as e:
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))
    return results


def print_selftest(results):
    for r in results:
        status(f"{'✅' if r.passed else '❌'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        status(f"\n❌ {len(failed)} check(s) failed: {', '.join(failed)}")
    else:
        status(f"\n✅ All {len(results)} checks passed")
    return not failed
