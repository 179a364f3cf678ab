"""
Deep Generative Models for Semi-Unsupervised Classification

Two models share one recognition structure, q(y|x) q(z|x,y):

- M2:     p(x, y, z) = p(x | y, z) p(y) p(z),   p(z) = N(0, I)
- GM-DGM: p(x, y, z) = p(x | z) p(z | y) p(y),  p(z | y) = N(mu(y), sigma^2(y))

GM-DGM conditions the latent prior on the class, giving a mixture of Gaussians
in z space; its decoder sees z only. Both are trained with the same objective:
the labelled ELBO plus an alpha-weighted cross entropy on labelled data, and the
class-marginalised ELBO on unlabelled data.
"""

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from .errors import CheckpointError, ConfigurationError, ContractError, DimensionError, ParseError
from .networks import HeadSpec, MlpSpec, build_mlp, glorot_normal, l2_weight_penalty
from .utils import atomic_write, read_key_values, write_key_values

CHECKPOINT_VERSION = 1


class ModelKind(str, Enum):
    M2 = "m2"
    GMDGM = "gmdgm"


class Likelihood(str, Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


@dataclass
class PriorY:
    """Categorical class prior p(y) = Cat(pi), stored as log pi."""

    log_pi: np.ndarray

    def __post_init__(self):
        self.log_pi = np.asarray(self.log_pi, dtype=np.float64)
        if self.log_pi.ndim != 1 or self.log_pi.size < 1:
            raise ConfigurationError("prior must be a non-empty vector", field="prior")
        if not np.all(np.isfinite(self.log_pi)):
            raise ConfigurationError("prior has non-finite log-probabilities", field="prior")
        if abs(np.exp(self.log_pi).sum() - 1.0) > 1e-9:
            raise ConfigurationError(
                f"prior sums to {np.exp(self.log_pi).sum():.12g}, expected 1", field="prior"
            )

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0):
            raise ConfigurationError("prior probabilities must be positive", field="prior")
        return cls(np.log(probs))

    @property
    def probs(self):
        return np.exp(self.log_pi)

    @property
    def k(self):
        return self.log_pi.size


@dataclass(frozen=True)
class ModelArchitecture:
    kind: ModelKind
    likelihood: Likelihood
    x_dim: int
    k_total: int
    z_dim: int = 100
    hidden_width: int = 500
    n_layers: int = 3

    def _sizes(self, n_in, n_out):
        return (n_in, *([self.hidden_width] * (self.n_layers - 1)), n_out)

    def encoder_y_spec(self):
        return MlpSpec(self._sizes(self.x_dim, self.k_total), (HeadSpec("logits", self.k_total),))

    def encoder_z_spec(self):
        heads = (HeadSpec("mu", self.z_dim), HeadSpec("log_var", self.z_dim))
        return MlpSpec(self._sizes(self.x_dim + self.k_total, 2 * self.z_dim), heads)

    def decoder_spec(self):
        n_in = self.z_dim + (self.k_total if self.kind == ModelKind.M2 else 0)
        if self.likelihood == Likelihood.BERNOULLI:
            return MlpSpec(self._sizes(n_in, self.x_dim), (HeadSpec("mean", self.x_dim, "sigmoid"),))
        heads = (HeadSpec("mu", self.x_dim), HeadSpec("log_var", self.x_dim))
        return MlpSpec(self._sizes(n_in, 2 * self.x_dim), heads)


class PriorNet:
    """Affine map from one-hot y to (mu(y), log sigma^2(y)): a per-class lookup."""

    def __init__(self, W, b, z_dim):
        self.W = W
        self.b = b
        self.z_dim = z_dim

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, y):
        h = ad.affine(y, self.W, self.b)
        mu = ad.slice_columns(h, 0, self.z_dim)
        log_var = ad.slice_columns(h, self.z_dim, 2 * self.z_dim)
        return dist.DiagGaussian.from_raw(mu, log_var)


@dataclass
class ModelParams:
    """All parameters (theta and phi) of one model."""

    arch: ModelArchitecture
    prior: PriorY
    encoder_y: object
    encoder_z: object
    decoder: object
    prior_net: PriorNet = None

    @property
    def kind(self):
        return self.arch.kind

    @property
    def dtype(self):
        return self.encoder_y.weights[0].dtype

    def parameters(self):
        """Flat ordered list used by the optimizer and the checkpoint blob."""
        params = self.encoder_y.parameters() + self.encoder_z.parameters() + self.decoder.parameters()
        if self.prior_net is not None:
            params += self.prior_net.parameters()
        return params

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]


def init_model(arch, prior, rng, dtype=np.float64):
    """
    Build freshly initialised parameters for an M2 or GM-DGM model

    Args:
        arch (ModelArchitecture): Kind, likelihood and network sizes
        prior (PriorY): Class prior; its length must equal arch.k_total
        rng (np.random.Generator): Seeded generator for Glorot-Normal init
        dtype: Parameter dtype

    Returns:
        ModelParams
    """
    if prior.k != arch.k_total:
        raise ConfigurationError(f"prior has {prior.k} classes, architecture {arch.k_total}", field="prior")
    encoder_y = build_mlp(arch.encoder_y_spec(), rng, dtype, name="encoder_y")
    encoder_z = build_mlp(arch.encoder_z_spec(), rng, dtype, name="encoder_z")
    decoder = build_mlp(arch.decoder_spec(), rng, dtype, name="decoder")
    prior_net = None
    if arch.kind == ModelKind.GMDGM:
        W = ad.Tensor(glorot_normal(arch.k_total, 2 * arch.z_dim, rng, dtype), requires_grad=True, name="prior_net.W")
        b = ad.Tensor(np.zeros(2 * arch.z_dim, dtype=dtype), requires_grad=True, name="prior_net.b")
        prior_net = PriorNet(W, b, arch.z_dim)
    return ModelParams(arch, prior, encoder_y, encoder_z, decoder, prior_net)


def one_hot(labels, k, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must be integers in [0, {k})")
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def _one_hot_input(params, y):
    y = _data(y)
    if y.ndim == 1:
        y = one_hot(y, params.arch.k_total)
    dist._check_one_hot(y)
    return ad.Tensor(y.astype(params.dtype, copy=False))


def _input(params, x):
    return ad.Tensor(_data(x).astype(params.dtype, copy=False))


def q_y_given_x(params, x):
    """The classifier q(y|x) = Cat(pi(x))."""
    logits = params.encoder_y(_input(params, x))["logits"]
    return dist.Categorical(ad.log_softmax(logits))


def q_z_given_xy(params, x, y):
    """q(z|x,y) = N(mu(x,y), diag sigma^2(x,y)) with clamped log-variance."""
    y = _one_hot_input(params, y)
    out = params.encoder_z(ad.concat([_input(params, x), y], axis=1))
    return dist.DiagGaussian.from_raw(out["mu"], out["log_var"])


def p_z_given_y(params, y):
    """Class-conditional latent prior p(z|y) of GM-DGM."""
    if params.kind != ModelKind.GMDGM:
        raise ContractError("p_z_given_y is only defined for GM-DGM; M2 uses N(0, I)")
    return params.prior_net(_one_hot_input(params, y))


def p_x_given_z(params, z, y=None):
    """Decoder distribution: Bernoulli means, or a diagonal Gaussian for real-valued features."""
    h = z
    if params.kind == ModelKind.M2:
        if y is None:
            raise ContractError("the M2 decoder needs y")
        h = ad.concat([z, _one_hot_input(params, y)], axis=1)
    out = params.decoder(h)
    if params.arch.likelihood == Likelihood.BERNOULLI:
        return dist.BernoulliVec.from_raw(out["mean"])
    return dist.DiagGaussian.from_raw(out["mu"], out["log_var"])


def _recon_log_prob(params, px, x):
    if params.arch.likelihood == Likelihood.BERNOULLI:
        return dist.bernoulli_log_prob(px, x)
    return dist.gaussian_log_prob(px, x)


@dataclass
class ElboTerms:
    recon: ad.Tensor
    kl_z: ad.Tensor
    log_prior_y: ad.Tensor

    def elbo(self):
        return self.recon - self.kl_z + self.log_prior_y


def _eps_samples(eps):
    """Split an eps array into a list of per-sample [batch, ...] arrays."""
    eps = _data(eps)
    return [eps] if eps.ndim == 2 else list(eps)


def labelled_terms(params, x, y, eps):
    """
    Components of ELBO(x, y): E_q[log p(x|z(,y))], KL(q(z|x,y) || p(z|y)) and log p(y).

    `eps` is [batch, z_dim], or [samples, batch, z_dim] to average the
    reconstruction term over several reparameterised draws.
    """
    y = _one_hot_input(params, y)
    x_in = _input(params, x)
    q = q_z_given_xy(params, x_in, y)
    prior_z = p_z_given_y(params, y) if params.kind == ModelKind.GMDGM else dist.standard_normal_like(q)

    samples = _eps_samples(eps)
    recon = None
    for eps_s in samples:
        z = dist.reparam_sample(q, eps_s)
        px = p_x_given_z(params, z, y)
        r = _recon_log_prob(params, px, x_in)
        recon = r if recon is None else recon + r
    if len(samples) > 1:
        recon = recon * (1.0 / len(samples))

    kl = dist.gaussian_kl(q, prior_z)
    log_py = ad.Tensor((y.data @ params.prior.log_pi).astype(params.dtype))
    return ElboTerms(recon, kl, log_py)


def elbo_labelled(params, x, y, eps):
    """Per-row ELBO(x, y) for observed one-hot y."""
    return labelled_terms(params, x, y, eps).elbo()


def _marginal_terms(params, x, eps_per_class, per_class=False):
    """
    Labelled terms for every (row, class) pair, each reshaped to [batch, K].

    With per_class=False, eps_per_class is [batch, z_dim], one draw shared by
    all class branches of a row. With per_class=True it is [batch, K, z_dim],
    one draw per row and class. Either may carry a leading samples axis.
    """
    x_data = _data(x)
    n, k, z_dim = x_data.shape[0], params.arch.k_total, params.arch.z_dim
    eps = _data(eps_per_class)
    expected = (n, k, z_dim) if per_class else (n, z_dim)
    if eps.ndim == len(expected):
        eps = eps[None]
    if eps.ndim != len(expected) + 1 or eps.shape[1:] != expected:
        layout = "[samples,] batch, K, z_dim" if per_class else "[samples,] batch, z_dim"
        raise DimensionError(f"noise has shape {_data(eps_per_class).shape}, expected {layout} = {expected}")
    if per_class:
        eps_rep = eps.reshape(eps.shape[0], n * k, z_dim)
    else:
        eps_rep = np.repeat(eps, k, axis=1)

    x_rep = np.repeat(x_data, k, axis=0)
    y_rep = np.tile(np.eye(k, dtype=params.dtype), (n, 1))
    terms = labelled_terms(params, x_rep, y_rep, eps_rep if eps_rep.shape[0] > 1 else eps_rep[0])
    return ElboTerms(
        ad.reshape(terms.recon, (n, k)),
        ad.reshape(terms.kl_z, (n, k)),
        ad.reshape(terms.log_prior_y, (n, k)),
    )


@dataclass
class UnlabelledTerms:
    recon: ad.Tensor
    kl_z: ad.Tensor
    log_prior_y: ad.Tensor
    entropy_y: ad.Tensor

    def elbo(self):
        return self.recon - self.kl_z + self.log_prior_y + self.entropy_y


def unlabelled_terms(params, x, eps_per_class, per_class=False):
    """q(y|x)-weighted labelled terms, summed over all classes, plus H(q(y|x))."""
    q = q_y_given_x(params, x)
    probs = ad.exp(q.log_probs)
    branches = _marginal_terms(params, x, eps_per_class, per_class)
    return UnlabelledTerms(
        ad.tensor_sum(probs * branches.recon, axis=1),
        ad.tensor_sum(probs * branches.kl_z, axis=1),
        ad.tensor_sum(probs * branches.log_prior_y, axis=1),
        dist.categorical_entropy(q),
    )


def elbo_unlabelled(params, x, eps_per_class, per_class=False):
    """Per-row ELBO(x) = sum_y q(y|x) ELBO(x, y) + H(q(y|x)), with y marginalised exactly."""
    return unlabelled_terms(params, x, eps_per_class, per_class).elbo()


@dataclass
class LossTerms:
    """The minimised loss and its logged parts (sums over the batch)."""

    total: ad.Tensor
    recon: float = 0.0
    kl_z: float = 0.0
    log_prior_y: float = 0.0
    entropy_y: float = 0.0
    cross_entropy: float = 0.0
    penalty: float = 0.0
    alpha: float = 0.0

    def as_dict(self):
        return {
            "loss": self.total.item(),
            "recon": self.recon,
            "kl_z": self.kl_z,
            "log_prior_y": self.log_prior_y,
            "entropy_y": self.entropy_y,
            "cross_entropy": self.cross_entropy,
            "penalty": self.penalty,
        }


def _batch_size(batch):
    if batch is None:
        return 0
    x = batch[0] if isinstance(batch, tuple) else batch
    return int(_data(x).shape[0])


def loss_terms(params, labelled_batch, unlabelled_batch, alpha, weight_precision,
               rng=None, eps_labelled=None, eps_unlabelled=None, mc_samples=1):
    """
    Loss = -sum_u ELBO(x_u) - sum_l [ELBO(x_l, y_l) - alpha * CE(y_l, q(y|x_l))] + L2 penalty

    Args:
        params (ModelParams): Model
        labelled_batch (tuple | None): (x, y) with y integer class slots or one-hot rows
        unlabelled_batch (array | None): x
        alpha (float): Weight of the cross-entropy term, >= 0
        weight_precision (float): Precision of the Gaussian weight prior, >= 0
        rng (np.random.Generator): Source of eps when not injected
        eps_labelled / eps_unlabelled: Optional injected noise, [batch, z_dim] or
            [samples, batch, z_dim]; unlabelled noise is shared across class branches
        mc_samples (int): Draws of z per datapoint when sampling from rng

    Returns:
        LossTerms
    """
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}", field="alpha")
    z_dim = params.arch.z_dim
    parts = []
    logged = {"recon": 0.0, "kl_z": 0.0, "log_prior_y": 0.0, "entropy_y": 0.0, "cross_entropy": 0.0}

    n_u = _batch_size(unlabelled_batch)
    if n_u:
        if eps_unlabelled is None:
            eps_unlabelled = rng.standard_normal((mc_samples, n_u, z_dim))
        u = unlabelled_terms(params, unlabelled_batch, eps_unlabelled)
        parts.append(-ad.tensor_sum(u.elbo()))
        logged["recon"] += float(u.recon.data.sum())
        logged["kl_z"] += float(u.kl_z.data.sum())
        logged["log_prior_y"] += float(u.log_prior_y.data.sum())
        logged["entropy_y"] += float(u.entropy_y.data.sum())

    n_l = _batch_size(labelled_batch)
    if n_l:
        x_l, y_l = labelled_batch
        y_l = _one_hot_input(params, y_l)
        if eps_labelled is None:
            eps_labelled = rng.standard_normal((mc_samples, n_l, z_dim))
        terms = labelled_terms(params, x_l, y_l, eps_labelled)
        ce = dist.categorical_cross_entropy(q_y_given_x(params, x_l), y_l)
        parts.append(-ad.tensor_sum(terms.elbo()))
        parts.append(ad.tensor_sum(ce) * float(alpha))
        logged["recon"] += float(terms.recon.data.sum())
        logged["kl_z"] += float(terms.kl_z.data.sum())
        logged["log_prior_y"] += float(terms.log_prior_y.data.sum())
        logged["cross_entropy"] += float(ce.data.sum())

    penalty = l2_weight_penalty(params.parameters(), weight_precision)
    total = penalty
    for part in parts:
        total = total + part
    return LossTerms(total, penalty=penalty.item(), alpha=float(alpha), **logged)


def total_loss(params, labelled_batch, unlabelled_batch, alpha, weight_precision, **kwargs):
    """Scalar training loss; see `loss_terms` for the breakdown."""
    return loss_terms(params, labelled_batch, unlabelled_batch, alpha, weight_precision, **kwargs).total


def predict_proba(params, x, batch_size=1000):
    """q(y|x) probabilities for every row, computed in batches without recording."""
    x = _data(x)
    out = []
    with ad.no_grad():
        for start in range(0, x.shape[0], batch_size):
            out.append(q_y_given_x(params, x[start:start + batch_size]).probs)
    if not out:
        return np.zeros((0, params.arch.k_total))
    return np.concatenate(out, axis=0)


def predict_classes(params, x, batch_size=1000):
    """argmax q(y|x); ties go to the lower class index."""
    return np.argmax(predict_proba(params, x, batch_size), axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: `<stem>.manifest` (key=value text) + `<stem>.bin` (little-endian float32)
# ---------------------------------------------------------------------------

def _stem(path):
    for suffix in (".manifest", ".bin"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_checkpoint(params, path, seed=0, epoch=0, extra=None):
    """
    Write a checkpoint: the parameter blob first, then the manifest describing it

    Args:
        params (ModelParams): Model to save
        path (str): Checkpoint stem (".manifest"/".bin" are appended)
        seed (int): Seed of the run
        epoch (int): Epoch the parameters belong to
        extra (dict): Additional manifest entries

    Returns:
        str: Path of the manifest
    """
    stem = _stem(path)
    flat = [p.data.astype("<f4").reshape(-1) for p in params.parameters()]
    blob = np.concatenate(flat) if flat else np.zeros(0, dtype="<f4")
    with atomic_write(stem + ".bin", mode="wb") as f:
        f.write(blob.tobytes())

    arch = params.arch
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model_kind": arch.kind.value,
        "likelihood": arch.likelihood.value,
        "x_dim": arch.x_dim,
        "k_total": arch.k_total,
        "z_dim": arch.z_dim,
        "hidden_width": arch.hidden_width,
        "n_layers": arch.n_layers,
        "prior_log_pi": [float(v) for v in params.prior.log_pi],
        "seed": seed,
        "epoch": epoch,
        "blob": os.path.basename(stem + ".bin"),
        "blob_dtype": "<f4",
        "n_values": int(blob.size),
        "layer_shapes": ";".join(f"{p.name}:{'x'.join(str(s) for s in p.shape)}" for p in params.parameters()),
    }
    manifest.update(extra or {})
    return write_key_values(manifest, stem + ".manifest")


def read_manifest(path):
    manifest = read_key_values(_stem(path) + ".manifest")
    if "version" not in manifest:
        raise CheckpointError(f"{path}: manifest has no version field")
    try:
        version = int(manifest["version"])
    except ValueError:
        raise CheckpointError(f"{path}: unreadable version '{manifest['version']}'") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return manifest


def load_checkpoint(path, dtype=np.float64):
    """
    Read a checkpoint written by `save_checkpoint`

    Returns:
        tuple: (ModelParams, manifest dict)
    """
    stem = _stem(path)
    try:
        manifest = read_manifest(stem)
        arch = ModelArchitecture(
            kind=ModelKind(manifest["model_kind"]),
            likelihood=Likelihood(manifest["likelihood"]),
            x_dim=int(manifest["x_dim"]),
            k_total=int(manifest["k_total"]),
            z_dim=int(manifest["z_dim"]),
            hidden_width=int(manifest["hidden_width"]),
            n_layers=int(manifest["n_layers"]),
        )
        prior = PriorY(np.array([float(v) for v in manifest["prior_log_pi"].split(",")]))
    except (KeyError, ValueError, ParseError) as e:
        raise CheckpointError(f"{stem}.manifest: malformed manifest ({e})") from e

    params = init_model(arch, prior, np.random.default_rng(0), dtype)
    blob_path = os.path.join(os.path.dirname(stem), manifest.get("blob", os.path.basename(stem) + ".bin"))
    if not os.path.exists(blob_path):
        raise CheckpointError(f"{blob_path}: parameter blob not found")
    blob = np.fromfile(blob_path, dtype="<f4")
    expected = sum(p.data.size for p in params.parameters())
    if blob.size != expected or blob.size != int(manifest.get("n_values", blob.size)):
        raise CheckpointError(f"{blob_path}: holds {blob.size} values, architecture needs {expected}")

    offset = 0
    for p in params.parameters():
        n = p.data.size
        p.data = blob[offset:offset + n].astype(dtype).reshape(p.shape)
        offset += n
    return params, manifest
