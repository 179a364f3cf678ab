"""Central finite differences against autodiff gradients."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckResult:
    max_relative_error: float
    per_parameter: dict = field(default_factory=dict)

    def passed(self, tolerance):
        return self.max_relative_error < tolerance


def numerical_gradient(fn, tensor, h=1e-5):
    """
    Approximate d fn() / d tensor with the central difference formula.

    `fn` takes no arguments and returns a scalar Tensor or float; `tensor.data`
    is perturbed in place one coordinate at a time and restored afterwards.
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = _scalar(fn())
            flat[i] = original - h
            f_minus = _scalar(fn())
            flat[i] = original
            flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-10):
    """||a - n|| / max(||a|| + ||n||, floor) over one parameter's gradient."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def analytic_gradients(fn, params):
    ad.zero_grad(params)
    with ad.Tape() as tape:
        loss = fn()
    ad.backward(loss, tape, params)
    return [p.grad.copy() for p in params]


def check_gradients(fn, params, h=1e-5):
    """
    Compare autodiff and finite-difference gradients of `fn` w.r.t. `params`.

    Args:
        fn (callable): Zero-argument function returning a scalar Tensor; it must be
            deterministic (inject any noise up front)
        params (list[Tensor]): Parameters requiring gradients, ideally float64
        h (float): Finite-difference step

    Returns:
        GradCheckResult: worst relative error overall and per parameter
    """
    analytic = analytic_gradients(fn, params)
    per_parameter = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        numeric = numerical_gradient(fn, p, h)
        per_parameter[p.name or f"param{i}"] = relative_error(a, numeric)
    worst = max(per_parameter.values()) if per_parameter else 0.0
    return GradCheckResult(worst, per_parameter)


def _scalar(value):
    if isinstance(value, ad.Tensor):
        return value.item()
    return float(value)
