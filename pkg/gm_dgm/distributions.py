"""
Distribution primitives: diagonal Gaussians, Bernoulli vectors and categoricals.

Every function takes and returns autodiff Tensors, so log-densities, KLs and
entropies are differentiable. Randomness is always injected by the caller
(`eps` arrays), which keeps every function deterministic.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, DomainError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
BERNOULLI_EPS = 1e-7
# log-probability used for an exact zero probability; exp() of it underflows to 0
LOG_ZERO = -1e4
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mu: ad.Tensor
    log_var: ad.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"DiagGaussian: mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @classmethod
    def from_raw(cls, mu, raw_log_var):
        """Build from network outputs, clamping log-variance to [-10, 10]."""
        return cls(mu, ad.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class BernoulliVec:
    mean: ad.Tensor

    @classmethod
    def from_raw(cls, mean):
        """Clamp means into [1e-7, 1 - 1e-7]."""
        return cls(ad.clamp(mean, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS))


@dataclass
class Categorical:
    log_probs: ad.Tensor

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            log_probs = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), LOG_ZERO)
        return cls(ad.Tensor(log_probs))

    @property
    def probs(self):
        return np.exp(self.log_probs.data)

    @property
    def num_classes(self):
        return self.log_probs.shape[-1]


def standard_normal_like(g):
    """N(0, I) with the same shape and dtype as `g` (the M2 prior on z)."""
    zeros = np.zeros(g.shape, dtype=g.mu.dtype)
    return DiagGaussian(ad.Tensor(zeros), ad.Tensor(zeros.copy()))


def _check_same(op, a, b):
    if tuple(a) != tuple(b):
        raise DimensionError(f"{op}: shapes {tuple(a)} and {tuple(b)} differ")


def reparam_sample(g, eps):
    """z = mu + exp(log_var / 2) * eps, differentiable w.r.t. mu and log_var."""
    eps = ad.as_tensor(eps, like=g.mu)
    _check_same("reparam_sample", g.shape, eps.shape)
    return g.mu + ad.exp(g.log_var * 0.5) * eps


def gaussian_log_prob(g, z):
    """Per-row log N(z; mu, diag(exp(log_var)))."""
    z = ad.as_tensor(z, like=g.mu)
    _check_same("gaussian_log_prob", g.shape, z.shape)
    diff = z - g.mu
    per_dim = -HALF_LOG_2PI - 0.5 * g.log_var - ad.square(diff) / (2.0 * ad.exp(g.log_var))
    return ad.tensor_sum(per_dim, axis=-1)


def gaussian_kl(q, p):
    """Per-row closed-form KL(q || p) between diagonal Gaussians."""
    _check_same("gaussian_kl", q.shape, p.shape)
    var_q = ad.exp(q.log_var)
    var_p = ad.exp(p.log_var)
    per_dim = (p.log_var - q.log_var) + (var_q + ad.square(q.mu - p.mu)) / var_p - 1.0
    return ad.tensor_sum(per_dim, axis=-1) * 0.5


def bernoulli_log_prob(b, x):
    """Per-row sum of x*log(mean) + (1-x)*log(1-mean); real-valued x in [0, 1] is allowed."""
    x = ad.as_tensor(x, like=b.mean)
    _check_same("bernoulli_log_prob", b.mean.shape, x.shape)
    if np.any(x.data < 0) or np.any(x.data > 1):
        raise DomainError("Bernoulli targets must lie in [0, 1]")
    mean = ad.clamp(b.mean, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    per_dim = x * ad.log(mean) + (1.0 - x) * ad.log(1.0 - mean)
    return ad.tensor_sum(per_dim, axis=-1)


def categorical_entropy(c):
    """Per-row -sum p log p, with 0 log 0 = 0."""
    probs = ad.exp(c.log_probs)
    return -ad.tensor_sum(probs * c.log_probs, axis=-1)


def _check_one_hot(y):
    data = y.data if isinstance(y, ad.Tensor) else np.asarray(y)
    if data.ndim != 2 or not np.all((data == 0) | (data == 1)) or not np.all(data.sum(axis=1) == 1):
        raise ContractError("y must be a batch of one-hot rows")


def categorical_cross_entropy(c, y):
    """Per-row -sum y * log_probs for one-hot y."""
    _check_one_hot(y)
    y = ad.as_tensor(y, like=c.log_probs)
    _check_same("categorical_cross_entropy", c.log_probs.shape, y.shape)
    return -ad.tensor_sum(y * c.log_probs, axis=-1)
