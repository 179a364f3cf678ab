"""
Reverse-mode Automatic Differentiation

A `Tensor` wraps a numpy array. Operations run while a `Tape` is active, with at
least one input that requires gradients, are appended to that tape together with
their backward rule. `backward(loss, tape)` replays the tape in exact reverse
order and accumulates d(loss)/d(tensor) into `.grad` of every tensor that
requires gradients.

The tape is rebuilt on every forward pass (define-by-run):

    with Tape() as tape:
        loss = model_loss(...)
    backward(loss, tape)

Outside a tape, or inside `no_grad()`, nothing is recorded.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

# Raise on NaN/Inf produced by any forward op
CHECK_FINITE = True

_TAPES = []


class Tensor:
    """Dense real-valued array with an optional gradient slot."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=""):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.entries = []

    def record(self, entry):
        self.entries.append(entry)

    def ops(self):
        return [entry.op for entry in self.entries]

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        top = _TAPES.pop()
        if top is not self:
            raise ContractError("tapes must be exited in reverse order of entry")
        return False


class no_grad:
    """Context in which no operation is recorded, even if a tape is active."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def current_tape():
    return _TAPES[-1] if _TAPES else None


def as_tensor(value, like=None):
    """Wrap a constant as a Tensor, matching the dtype of `like` when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _result(op, data, inputs, backward_rule):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeEntry(op, tuple(inputs), out, backward_rule))
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    return _result(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def neg(a):
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _result("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    # Subgradient at exactly 0 is 0
    mask = (a.data > 0).astype(a.dtype)
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _result("softplus", out, (a,), lambda g: (g * expit(a.data),))


def clamp(a, low, high):
    """Clip to [low, high]; the gradient is zero outside the interval."""
    a = as_tensor(a)
    mask = ((a.data >= low) & (a.data <= high)).astype(a.dtype)
    return _result("clamp", np.clip(a.data, low, high), (a,), lambda g: (g * mask,))


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
}


def activation(x, kind):
    """Apply an elementwise activation: relu, sigmoid, exp, log or softplus."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation '{kind}'") from None
    return fn(x)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward_rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_rule)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(tensor_sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_columns(a, start, stop):
    """Columns [start, stop) of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_columns: cannot take [{start}:{stop}] of shape {a.shape}")

    def backward_rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_columns", a.data[:, start:stop], (a,), backward_rule)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def affine(x, W, b):
    """x @ W + b for x [batch, in], W [in, out], b [out]."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weights {W.shape} and bias {b.shape}")
    return _result(
        "affine",
        x.data @ W.data + b.data,
        (x, W, b),
        lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def log_softmax(x):
    """Row-wise log-softmax over the last axis, stabilised by max-subtraction."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs at least one class, got shape {x.shape}")
    out = x.data - logsumexp(x.data, axis=-1, keepdims=True)

    def backward_rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), backward_rule)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _accumulate(tensor, grad):
    tensor.grad = np.array(grad, dtype=tensor.dtype) if tensor.grad is None else tensor.grad + grad


def backward(loss, tape, params=None):
    """
    Populate gradients of `loss` w.r.t. every tensor recorded on `tape`.

    Gradients accumulate into `.grad`: calling backward twice without
    `zero_grad` sums both passes. Tensors in `params` that the loss does not
    depend on end up with an all-zero gradient.

    Args:
        loss (Tensor): Single-element tensor
        tape (Tape): Tape that recorded the forward pass producing `loss`
        params (list[Tensor]): Optional parameters to guarantee a gradient slot for

    Returns:
        list[Tensor]: `params` (or an empty list) with gradients populated
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        _accumulate(entry.output, g)
        for tensor, grad in zip(entry.inputs, entry.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad), tensor.shape)
            key = id(tensor)
            grads[key] = grad if key not in grads else grads[key] + grad
            tensors[key] = tensor

    for key, g in grads.items():
        _accumulate(tensors[key], g)

    params = list(params or [])
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return params


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)
