"""
Multi-layer perceptrons on top of the autodiff engine.

All networks are small MLPs with ReLU hidden units, 2 to 4 weight layers,
Glorot-Normal kernels and zero biases. The final layer is split into named
output heads, each with its own activation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

MIN_WEIGHT_LAYERS = 2
MAX_WEIGHT_LAYERS = 4
HEAD_ACTIVATIONS = ("linear", "softmax", "sigmoid")


@dataclass(frozen=True)
class HeadSpec:
    name: str
    size: int
    activation: str = "linear"


@dataclass(frozen=True)
class MlpSpec:
    """
    Shape of an MLP.

    `layer_sizes` lists input, hidden and output widths, so [784, 500, 500, 15]
    has three weight layers. Head sizes must add up to the output width; with
    no heads the whole output is one linear head called "out".
    """

    layer_sizes: tuple
    output_heads: tuple = field(default_factory=tuple)
    hidden_activation: str = "relu"

    def heads(self):
        if self.output_heads:
            return tuple(self.output_heads)
        return (HeadSpec("out", self.layer_sizes[-1], "linear"),)

    def validate(self):
        sizes = tuple(self.layer_sizes)
        n_weight_layers = len(sizes) - 1
        if not MIN_WEIGHT_LAYERS <= n_weight_layers <= MAX_WEIGHT_LAYERS:
            raise ConfigurationError(
                f"an MLP needs {MIN_WEIGHT_LAYERS}-{MAX_WEIGHT_LAYERS} weight layers, got {n_weight_layers}",
                field="layer_sizes",
            )
        if any(int(s) < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}", field="layer_sizes")
        if self.hidden_activation != "relu":
            raise ConfigurationError(
                f"unsupported hidden activation '{self.hidden_activation}'", field="hidden_activation"
            )
        heads = self.heads()
        for head in heads:
            if head.size < 1:
                raise ConfigurationError(f"head '{head.name}' has size {head.size}", field="output_heads")
            if head.activation not in HEAD_ACTIVATIONS:
                raise ConfigurationError(
                    f"head '{head.name}' has unknown activation '{head.activation}'", field="output_heads"
                )
        if sum(h.size for h in heads) != sizes[-1]:
            raise ConfigurationError(
                f"head sizes {[h.size for h in heads]} do not add up to output width {sizes[-1]}",
                field="output_heads",
            )
        if len({h.name for h in heads}) != len(heads):
            raise ConfigurationError("head names must be unique", field="output_heads")


def glorot_normal(fan_in, fan_out, rng, dtype=np.float64):
    """Weights drawn from Normal(0, 2 / (fan_in + fan_out))."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


class Mlp:
    """A built MLP: its parameters plus the forward function (`__call__`)."""

    def __init__(self, spec, weights, biases, name="mlp"):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self.name = name

    def parameters(self):
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def __call__(self, x):
        """Map a [batch, in] input to a dict of head outputs."""
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, W, b)
            if i < last:
                h = ad.relu(h)

        heads = self.spec.heads()
        outputs = {}
        start = 0
        for head in heads:
            out = h if len(heads) == 1 else ad.slice_columns(h, start, start + head.size)
            start += head.size
            if head.activation == "softmax":
                # softmax heads are emitted as log-probabilities
                out = ad.log_softmax(out)
            elif head.activation == "sigmoid":
                out = ad.sigmoid(out)
            outputs[head.name] = out
        return outputs


def build_mlp(spec, rng, dtype=np.float64, name="mlp"):
    """
    Build an MLP with Glorot-Normal weights and zero biases

    Args:
        spec (MlpSpec): Layer sizes and heads
        rng (np.random.Generator): Seeded generator; same seed gives identical weights
        dtype: Parameter dtype (float64 for gradient checks, float32 permitted for training)
        name (str): Prefix for parameter names

    Returns:
        Mlp: parameters via `.parameters()`, forward via calling the object
    """
    spec.validate()
    sizes = [int(s) for s in spec.layer_sizes]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(ad.Tensor(glorot_normal(fan_in, fan_out, rng, dtype), requires_grad=True, name=f"{name}.W{i}"))
        biases.append(ad.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True, name=f"{name}.b{i}"))
    return Mlp(spec, weights, biases, name=name)


def l2_weight_penalty(params, precision):
    """
    Gaussian prior on the weights as an L2 penalty: (precision / 2) * sum(W**2).

    Only weight matrices (2-D parameters) are penalised; biases are excluded.
    """
    if precision < 0:
        raise ConfigurationError(f"weight precision must be >= 0, got {precision}", field="weight_precision")
    weights = [p for p in params if p.ndim == 2]
    dtype = weights[0].dtype if weights else np.float64
    total = ad.Tensor(np.zeros((), dtype=dtype))
    if precision == 0:
        return total
    for W in weights:
        total = total + ad.tensor_sum(ad.square(W))
    return total * (0.5 * precision)
