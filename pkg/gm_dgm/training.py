"""
Training

Adam on the total loss, with every step pairing one unlabelled batch with one
labelled batch. An epoch visits each unlabelled point exactly once; the (usually
much smaller) labelled pool is reshuffled and recycled as often as needed.

Per-epoch loss components, validation ELBO and validation accuracy go to
`history.csv`; checkpoints are written every `checkpoint_every` epochs and
whenever validation improves. Full-precision resumable state (parameters, Adam
moments, RNG states, early-stopping counters) lives in `state.npz`/`state.json`.
"""

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import autodiff as ad
from .data import binarize
from .errors import CheckpointError, ConfigurationError, NonFiniteError, NonFiniteGradientError, TrainingDivergedError
from .evaluation import cluster_accuracy
from .models import (
    Likelihood,
    ModelArchitecture,
    ModelKind,
    elbo_unlabelled,
    init_model,
    loss_terms,
    predict_classes,
    save_checkpoint,
)
from .networks import MAX_WEIGHT_LAYERS, MIN_WEIGHT_LAYERS
from .utils import (
    atomic_write,
    format_duration,
    load_data_from_json,
    read_csv,
    save_data_to_json,
    status,
    timed,
    warn_status,
    write_csv,
)

HISTORY_COLUMNS = [
    "epoch", "loss", "recon", "kl_z", "log_prior_y", "entropy_y",
    "cross_entropy", "penalty", "val_elbo", "val_accuracy",
]
STATE_NPZ = "state.npz"
STATE_JSON = "state.json"
HISTORY_FILE = "history.csv"
CHECKPOINT_DIR = "checkpoints"
BEST_CHECKPOINT = "best"


@dataclass
class TrainConfig:
    model: ModelKind = ModelKind.GMDGM
    likelihood: Likelihood = Likelihood.BERNOULLI
    epochs: int = 200
    batch_size_labelled: int = 100
    batch_size_unlabelled: int = 100
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = None  # None: 0.1 * N_total / N_labelled
    weight_precision: float = 1e-3
    seed: int = 0
    mc_samples: int = 1
    hidden_width: int = 500
    n_layers: int = 3
    z_dim: int = 100
    float32: bool = False
    binarize: bool = False
    patience: int = 20
    checkpoint_every: int = 10
    eval_batch_size: int = 1000
    progress: bool = True

    def validate(self):
        positive = ("batch_size_labelled", "batch_size_unlabelled", "lr", "adam_eps", "mc_samples",
                    "hidden_width", "z_dim", "patience", "checkpoint_every", "eval_batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"must be positive, got {getattr(self, name)}", field=name)
        if self.epochs < 0:
            raise ConfigurationError(f"must be >= 0, got {self.epochs}", field="epochs")
        if not MIN_WEIGHT_LAYERS <= self.n_layers <= MAX_WEIGHT_LAYERS:
            raise ConfigurationError(
                f"must lie in [{MIN_WEIGHT_LAYERS}, {MAX_WEIGHT_LAYERS}], got {self.n_layers}", field="n_layers"
            )
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"must lie in [0, 1), got {getattr(self, name)}", field=name)
        if self.alpha is not None and self.alpha < 0:
            raise ConfigurationError(f"must be >= 0, got {self.alpha}", field="alpha")
        if self.weight_precision < 0:
            raise ConfigurationError(f"must be >= 0, got {self.weight_precision}", field="weight_precision")
        return self

    @property
    def dtype(self):
        return np.float32 if self.float32 else np.float64

    def resolve_alpha(self, n_labelled, n_unlabelled):
        if self.alpha is not None:
            return float(self.alpha)
        if n_labelled == 0:
            return 0.0
        return 0.1 * (n_labelled + n_unlabelled) / n_labelled

    def architecture(self, x_dim, k_total):
        return ModelArchitecture(
            kind=ModelKind(self.model),
            likelihood=Likelihood(self.likelihood),
            x_dim=int(x_dim),
            k_total=int(k_total),
            z_dim=self.z_dim,
            hidden_width=self.hidden_width,
            n_layers=self.n_layers,
        )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(state, params, grads=None):
    """
    One bias-corrected Adam update, applied to `params` in place

    Args:
        state (AdamState): Moments and step count; updated in place
        params (list[Tensor]): Parameters, in the same order as the moments
        grads (list[np.ndarray]): Gradients; defaults to each parameter's `.grad`

    Returns:
        tuple: (params, state)
    """
    grads = grads if grads is not None else [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigurationError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moments")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise NonFiniteGradientError(f"{p.name or i} (gradient missing)")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name or f"param{i}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def steps_per_epoch(split, cfg):
    return math.ceil(len(split.unlabelled) / cfg.batch_size_unlabelled)


def minibatch_interleave(split, cfg, rng):
    """
    Yield one epoch of (labelled_batch, unlabelled_batch) pairs

    labelled_batch is (x, class slots), or None when the labelled pool is empty.
    """
    x_u = split.unlabelled.features
    n_u = x_u.shape[0]
    if n_u == 0:
        raise ConfigurationError("the unlabelled set is empty", field="labels_per_class")
    x_l = split.labelled.features
    y_l = split.labelled_slots()
    n_l = x_l.shape[0]
    batch_l = min(cfg.batch_size_labelled, n_l)

    order_u = rng.permutation(n_u)
    order_l = rng.permutation(n_l) if n_l else None
    position = 0
    for start in range(0, n_u, cfg.batch_size_unlabelled):
        x_unlabelled = x_u[order_u[start:start + cfg.batch_size_unlabelled]]
        labelled = None
        if n_l:
            chunks, need = [], batch_l
            while need:
                if position == n_l:
                    order_l = rng.permutation(n_l)
                    position = 0
                chunk = order_l[position:position + need]
                position += chunk.size
                need -= chunk.size
                chunks.append(chunk)
            idx = np.concatenate(chunks)
            x_labelled = x_l[idx]
            if cfg.binarize:
                x_labelled = binarize(x_labelled, rng)
            labelled = (x_labelled, y_l[idx])
        if cfg.binarize:
            x_unlabelled = binarize(x_unlabelled, rng)
        yield labelled, x_unlabelled


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validation_elbo(params, x, eps, batch_size=1000):
    """Mean per-point ELBO(x) with y marginalised, using fixed noise."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, x.shape[0], batch_size):
            stop = start + batch_size
            total += float(elbo_unlabelled(params, x[start:stop], eps[start:stop]).data.sum())
    return total / max(x.shape[0], 1)


def validation_accuracy(params, ds, batch_size=1000):
    """Accuracy after attributing each predicted class to its modal true class."""
    keep = ds.labels >= 0
    if not np.any(keep):
        return float("nan")
    pred = predict_classes(params, ds.features[keep], batch_size)
    return cluster_accuracy(pred, ds.labels[keep], params.arch.k_total)


# ---------------------------------------------------------------------------
# History and resumable state
# ---------------------------------------------------------------------------

def write_history(rows, path):
    """Write per-epoch rows (dicts) as CSV with the fixed column order."""
    frame = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return write_csv(frame, path)


def save_training_state(out_dir, params, adam, rngs, info):
    """
    Save everything needed to continue a run bit-for-bit

    Args:
        out_dir (str): Run directory
        params (ModelParams): Current parameters (saved at full precision)
        adam (AdamState): Optimizer moments and step count
        rngs (dict): Named numpy Generators whose states are stored
        info (dict): Epoch counters and early-stopping bookkeeping
    """
    arrays = {}
    for i, p in enumerate(params.parameters()):
        arrays[f"param_{i}"] = p.data
        arrays[f"m_{i}"] = adam.m[i]
        arrays[f"v_{i}"] = adam.v[i]
    with atomic_write(os.path.join(out_dir, STATE_NPZ), mode="wb") as f:
        np.savez(f, **arrays)
    payload = dict(info)
    payload["adam_t"] = adam.t
    payload["n_params"] = len(params.parameters())
    payload["rng_states"] = {name: rng.bit_generator.state for name, rng in rngs.items()}
    save_data_to_json(payload, os.path.join(out_dir, STATE_JSON))


def load_training_state(out_dir, params, adam, rngs):
    """Restore state written by `save_training_state` in place; returns the info dict."""
    npz_path = os.path.join(out_dir, STATE_NPZ)
    json_path = os.path.join(out_dir, STATE_JSON)
    if not (os.path.exists(npz_path) and os.path.exists(json_path)):
        raise CheckpointError(f"{out_dir}: no resumable training state found")
    info = load_data_from_json(json_path)
    param_list = params.parameters()
    if info.get("n_params") != len(param_list):
        raise CheckpointError(f"{out_dir}: state holds {info.get('n_params')} parameters, model has {len(param_list)}")
    with np.load(npz_path) as arrays:
        for i, p in enumerate(param_list):
            if arrays[f"param_{i}"].shape != p.shape:
                raise CheckpointError(f"{out_dir}: parameter {p.name} has shape {arrays[f'param_{i}'].shape}, expected {p.shape}")
            p.data = arrays[f"param_{i}"].astype(p.dtype)
            adam.m[i] = arrays[f"m_{i}"].copy()
            adam.v[i] = arrays[f"v_{i}"].copy()
    adam.t = int(info["adam_t"])
    for name, rng in rngs.items():
        rng.bit_generator.state = info["rng_states"][name]
    return info


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: object
    history: pd.DataFrame
    alpha: float
    seed: int
    epochs_completed: int = 0
    best_epoch: int = 0
    best_val_elbo: float = float("nan")
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    out_dir: str = None
    best_checkpoint: str = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


def _checkpoint_stem(out_dir, name):
    return os.path.join(out_dir, CHECKPOINT_DIR, name)


def train(split, cfg, out_dir=None, resume=False):
    """
    Train an M2 or GM-DGM model on a semi-unsupervised split

    Args:
        split (SemiUnsupervisedSplit): Labelled/unlabelled pools, prior, optional validation set
        cfg (TrainConfig): Hyperparameters
        out_dir (str): Run directory for history, checkpoints and resumable state (None: keep in memory)
        resume (bool): Continue from the state saved in out_dir

    Returns:
        TrainResult
    """
    cfg.validate()
    if out_dir is not None:
        out_dir = os.path.abspath(out_dir)
        os.makedirs(os.path.join(out_dir, CHECKPOINT_DIR), exist_ok=True)

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_batches, rng_noise, rng_validation = (np.random.default_rng(s) for s in seeds)

    arch = cfg.architecture(split.unlabelled.n_features, split.k_total)
    params = init_model(arch, split.prior, rng_init, cfg.dtype)
    param_list = params.parameters()
    adam = AdamState.init(param_list, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    alpha = cfg.resolve_alpha(len(split.labelled), len(split.unlabelled))

    validation = split.validation
    val_eps = None
    if validation is not None and len(validation):
        val_eps = rng_validation.standard_normal((len(validation), cfg.z_dim))

    rngs = {"batches": rng_batches, "noise": rng_noise}
    history = []
    start_epoch = 0
    best = {"monitor": -np.inf, "epoch": 0, "val_elbo": float("nan"), "val_accuracy": float("nan")}
    bad_epochs = 0
    last_good = None
    stopped_early = False

    if resume:
        if out_dir is None:
            raise ConfigurationError("resuming needs a run directory", field="out_dir")
        info = load_training_state(out_dir, params, adam, rngs)
        start_epoch = int(info["epoch"])
        best = info["best"]
        bad_epochs = int(info["bad_epochs"])
        last_good = info.get("last_good_checkpoint")
        history = read_csv(os.path.join(out_dir, HISTORY_FILE)).to_dict("records")[:start_epoch]
        stopped_early = bool(info.get("stopped_early")) or (val_eps is not None and bad_epochs >= cfg.patience)
        if stopped_early:
            status(f"⏹️ Run already stopped early at epoch {start_epoch}, nothing to resume")
        else:
            status(f"🔄 Resuming from epoch {start_epoch}")

    n_steps = steps_per_epoch(split, cfg) if cfg.epochs else 0
    last_epoch = start_epoch if stopped_early else cfg.epochs

    with timed() as elapsed:
        epochs = tqdm(range(start_epoch + 1, last_epoch + 1), desc=f"Training {arch.kind.value}",
                      disable=not cfg.progress, initial=start_epoch, total=cfg.epochs)
        for epoch in epochs:
            sums = dict.fromkeys(HISTORY_COLUMNS[1:8], 0.0)
            batches = minibatch_interleave(split, cfg, rng_batches)
            try:
                for labelled, unlabelled in tqdm(batches, total=n_steps, leave=False, disable=not cfg.progress):
                    ad.zero_grad(param_list)
                    with ad.Tape() as tape:
                        terms = loss_terms(params, labelled, unlabelled, alpha, cfg.weight_precision,
                                           rng=rng_noise, mc_samples=cfg.mc_samples)
                    if not np.isfinite(terms.total.item()):
                        raise NonFiniteError(f"loss is {terms.total.item()} at epoch {epoch}")
                    ad.backward(terms.total, tape, param_list)
                    adam_step(adam, param_list)
                    for key, value in terms.as_dict().items():
                        sums[key] += value
            except NonFiniteError as e:
                raise TrainingDivergedError(f"training diverged at epoch {epoch}: {e}", last_good) from e

            row = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
            row["val_elbo"] = float("nan")
            row["val_accuracy"] = float("nan")
            if val_eps is not None:
                row["val_elbo"] = validation_elbo(params, validation.features, val_eps, cfg.eval_batch_size)
                row["val_accuracy"] = validation_accuracy(params, validation, cfg.eval_batch_size)
            history.append(row)

            monitor = row["val_elbo"] if val_eps is not None else -row["loss"]
            improved = monitor > best["monitor"]
            if improved:
                best = {"monitor": monitor, "epoch": epoch,
                        "val_elbo": row["val_elbo"], "val_accuracy": row["val_accuracy"]}
                bad_epochs = 0
            else:
                bad_epochs += 1
            stopped_early = val_eps is not None and bad_epochs >= cfg.patience

            if out_dir is not None:
                if improved:
                    last_good = save_checkpoint(params, _checkpoint_stem(out_dir, BEST_CHECKPOINT), cfg.seed, epoch)
                if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                    last_good = save_checkpoint(params, _checkpoint_stem(out_dir, f"epoch_{epoch:04d}"), cfg.seed, epoch)
                write_history(history, os.path.join(out_dir, HISTORY_FILE))
                info = {"epoch": epoch, "best": best, "bad_epochs": bad_epochs, "last_good_checkpoint": last_good,
                        "stopped_early": stopped_early}
                save_training_state(out_dir, params, adam, rngs, info)

            epochs.set_postfix(loss=f"{row['loss']:.2f}", val_elbo=f"{row['val_elbo']:.2f}")
            if stopped_early:
                tqdm.write(f"⏹️ Early stopping at epoch {epoch}: no validation improvement for {cfg.patience} epochs")
                break
        wall_time = elapsed()

    if out_dir is not None and not history:
        write_history(history, os.path.join(out_dir, HISTORY_FILE))
    best_checkpoint = None
    if out_dir is not None and os.path.exists(_checkpoint_stem(out_dir, BEST_CHECKPOINT) + ".manifest"):
        best_checkpoint = _checkpoint_stem(out_dir, BEST_CHECKPOINT)

    result = TrainResult(
        params=params,
        history=pd.DataFrame(history, columns=HISTORY_COLUMNS),
        alpha=alpha,
        seed=cfg.seed,
        epochs_completed=history[-1]["epoch"] if history else 0,
        best_epoch=best["epoch"],
        best_val_elbo=best["val_elbo"],
        best_val_accuracy=best["val_accuracy"],
        stopped_early=stopped_early,
        out_dir=out_dir,
        best_checkpoint=best_checkpoint,
        wall_time=wall_time,
        extra={"config": asdict(cfg)},
    )
    print_training_summary(result)
    return result


def print_training_summary(result):
    status("\n📊 Training Summary")
    status(f"  Epochs completed:  {result.epochs_completed}")
    status(f"  Best epoch:        {result.best_epoch}")
    status(f"  Best val ELBO:     {result.best_val_elbo:.4f}")
    status(f"  Best val accuracy: {result.best_val_accuracy:.4f}")
    status(f"  Alpha:             {result.alpha:.4f}")
    status(f"  Wall time:         {format_duration(result.wall_time)}")
    if result.stopped_early:
        warn_status("stopped early on validation patience")
