"""
Experiment configuration.

Configs are flat `key=value` files read with python-dotenv, so `#` comments and
`${VAR}` references to the environment work as in a `.env` file. Every key maps
to one `ExperimentConfig` field; unknown keys are rejected before any work is
done, and the fully resolved config is written next to the run outputs.
"""

import os
from dataclasses import dataclass, field, fields

from . import DATA_DIR, RUNS_DIR
from .errors import ConfigurationError
from .models import Likelihood, ModelKind
from .training import TrainConfig
from .utils import read_key_values, write_key_values

DATASETS = ("mnist", "synthetic", "csv")
ATTRIBUTION_SETS = ("test", "validation")
RESOLVED_CONFIG = "resolved_config.cfg"
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(value):
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"expected true/false, got '{value}'")


def _optional(parse):
    def parse_optional(value):
        text = str(value).strip()
        return None if text in ("", "auto") else parse(text)
    return parse_optional


def _int_list(value):
    text = str(value).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _float_list(value):
    text = str(value).strip()
    return tuple(float(v) for v in text.split(",") if v.strip()) if text else ()


def _option(default, parse, **kwargs):
    return field(default=default, metadata={"parse": parse}, **kwargs)


@dataclass
class ExperimentConfig:
    # data source
    dataset: str = _option("mnist", str)
    mnist_dir: str = _option("", str)
    mnist_train_images: str = _option("train-images-idx3-ubyte", str)
    mnist_train_labels: str = _option("train-labels-idx1-ubyte", str)
    mnist_test_images: str = _option("t10k-images-idx3-ubyte", str)
    mnist_test_labels: str = _option("t10k-labels-idx1-ubyte", str)
    train_subset: int = _option(0, int)
    csv_path: str = _option("", str)
    test_fraction: float = _option(0.2, float)
    synthetic_windows: int = _option(20000, int)
    synthetic_classes: int = _option(8, int)
    synthetic_features: int = _option(126, int)
    synthetic_class_weights: tuple = _option((), _float_list)
    synthetic_separation: float = _option(0.5, float)
    standardize: bool = _option(None, _optional(_parse_bool))

    # split
    semi_sup_classes: tuple = _option((0, 1, 2, 8, 9), _int_list)
    unsup_classes: tuple = _option((3, 4, 5, 6, 7), _int_list)
    labels_per_class: int = _option(100, int)
    k_extra: int = _option(5, int)
    prior_semi_sup_mass: float = _option(None, _optional(float))
    prior_unsup_mass: float = _option(None, _optional(float))
    validation_size: int = _option(5000, int)

    # model
    model: ModelKind = _option(ModelKind.GMDGM, ModelKind)
    likelihood: str = _option("auto", str)
    hidden_width: int = _option(500, int)
    n_layers: int = _option(3, int)
    z_dim: int = _option(100, int)

    # training
    epochs: int = _option(200, int)
    batch_size_labelled: int = _option(100, int)
    batch_size_unlabelled: int = _option(100, int)
    lr: float = _option(3e-4, float)
    beta1: float = _option(0.9, float)
    beta2: float = _option(0.999, float)
    adam_eps: float = _option(1e-8, float)
    alpha: float = _option(None, _optional(float))
    weight_precision: float = _option(1e-3, float)
    mc_samples: int = _option(1, int)
    float32: bool = _option(False, _parse_bool)
    binarize: bool = _option(False, _parse_bool)
    patience: int = _option(20, int)
    checkpoint_every: int = _option(10, int)
    seed: int = _option(0, int)
    repeats: int = _option(1, int)
    progress: bool = _option(True, _parse_bool)

    # evaluation and output
    attribution_set: str = _option("test", str)
    eval_batch_size: int = _option(1000, int)
    out_dir: str = _option("", str)

    @property
    def resolved_likelihood(self):
        if self.likelihood == "auto":
            return Likelihood.BERNOULLI if self.dataset == "mnist" else Likelihood.GAUSSIAN
        return Likelihood(self.likelihood)

    @property
    def resolved_standardize(self):
        return self.dataset != "mnist" if self.standardize is None else self.standardize

    def train_config(self, seed=None):
        """The training hyperparameters, optionally with a different seed."""
        return TrainConfig(
            model=ModelKind(self.model),
            likelihood=self.resolved_likelihood,
            epochs=self.epochs,
            batch_size_labelled=self.batch_size_labelled,
            batch_size_unlabelled=self.batch_size_unlabelled,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            alpha=self.alpha,
            weight_precision=self.weight_precision,
            seed=self.seed if seed is None else seed,
            mc_samples=self.mc_samples,
            hidden_width=self.hidden_width,
            n_layers=self.n_layers,
            z_dim=self.z_dim,
            float32=self.float32,
            binarize=self.binarize,
            patience=self.patience,
            checkpoint_every=self.checkpoint_every,
            eval_batch_size=self.eval_batch_size,
            progress=self.progress,
        )

    def validate(self):
        """Check every field; raises ConfigurationError naming the first bad one."""
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"must be one of {DATASETS}, got '{self.dataset}'", field="dataset")
        if self.likelihood != "auto" and self.likelihood not in {l.value for l in Likelihood}:
            raise ConfigurationError(f"must be auto, bernoulli or gaussian, got '{self.likelihood}'", field="likelihood")
        if self.attribution_set not in ATTRIBUTION_SETS:
            raise ConfigurationError(f"must be one of {ATTRIBUTION_SETS}, got '{self.attribution_set}'",
                                     field="attribution_set")
        if self.attribution_set == "validation" and self.validation_size <= 0:
            raise ConfigurationError("validation attribution needs validation_size > 0", field="attribution_set")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigurationError("required when dataset=csv", field="csv_path")
        if self.dataset != "mnist" and not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"must lie in (0, 1), got {self.test_fraction}", field="test_fraction")
        if self.synthetic_class_weights and len(self.synthetic_class_weights) != self.synthetic_classes:
            raise ConfigurationError(
                f"{len(self.synthetic_class_weights)} weights for {self.synthetic_classes} classes",
                field="synthetic_class_weights",
            )
        if set(self.semi_sup_classes) & set(self.unsup_classes):
            raise ConfigurationError("overlaps semi_sup_classes", field="unsup_classes")
        if not self.semi_sup_classes and not self.unsup_classes:
            raise ConfigurationError("no classes configured", field="semi_sup_classes")
        for name in ("labels_per_class", "k_extra", "validation_size", "train_subset"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if self.repeats < 1:
            raise ConfigurationError(f"must be >= 1, got {self.repeats}", field="repeats")
        self.train_config().validate()
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def write_resolved(self, out_dir):
        """Write every field, defaults included, to <out_dir>/resolved_config.cfg."""
        path = os.path.join(out_dir, RESOLVED_CONFIG)
        return write_key_values(self.to_dict(), path, header="Fully resolved experiment configuration")


def _field_parsers():
    return {f.name: f.metadata["parse"] for f in fields(ExperimentConfig)}


def parse_config(values, source="config"):
    """
    Build a validated ExperimentConfig from raw string values

    Args:
        values (dict): key -> raw string (or already typed) value
        source (str): Name used for the default output directory

    Returns:
        ExperimentConfig
    """
    parsers = _field_parsers()
    kwargs = {}
    for key, raw in values.items():
        key = key.strip()
        if key not in parsers:
            raise ConfigurationError(f"unknown configuration key in {source}", field=key)
        if not isinstance(raw, str):
            kwargs[key] = raw
            continue
        try:
            kwargs[key] = parsers[key](raw.strip())
        except ValueError as e:
            raise ConfigurationError(f"invalid value '{raw}' ({e})", field=key) from None
    cfg = ExperimentConfig(**kwargs)
    if not cfg.mnist_dir:
        cfg.mnist_dir = os.path.join(DATA_DIR, "mnist")
    if not cfg.out_dir:
        cfg.out_dir = os.path.join(RUNS_DIR, source)
    return cfg.validate()


def load_config(path, overrides=None):
    """
    Read a config file and apply command-line overrides

    Params:
        path (str): `key=value` config file
        overrides (dict): Field values that replace the file's (None values are ignored)

    Returns:
        ExperimentConfig: validated
    """
    os.environ.setdefault("GMDGM_DATA_DIR", DATA_DIR)
    os.environ.setdefault("GMDGM_RUNS_DIR", RUNS_DIR)
    values = read_key_values(path, interpolate=True)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem == os.path.splitext(RESOLVED_CONFIG)[0]:
        stem = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parse_config(values, source=stem)
