"""
Datasets and Semi-Unsupervised Splits

Covers MNIST ingestion from IDX files, construction of semi-unsupervised
splits (sparsely-labelled classes plus entirely-unlabelled classes), the class
prior, the fine-to-coarse activity label dictionary, a synthetic windowed-
features dataset with configurable class imbalance, and feature standardisation.

Ground-truth labels of unlabelled points never live in a training-path Dataset:
the split keeps them in a separate `GroundTruth` used by evaluation only.
"""

import gzip
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigurationError, ParseError
from .models import PriorY
from .utils import read_csv, warn_status, write_csv

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
VARIANCE_FLOOR = 1e-8
UNLABELLED = -1

DEFAULT_DICTIONARY_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources", "cpa_dictionary.csv")


@dataclass
class Dataset:
    """Features [N, D] with integer labels (-1 = unlabelled)."""

    features: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigurationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigurationError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.labels.size and (self.labels.min() < UNLABELLED or
                                 (self.class_names and self.labels.max() >= len(self.class_names))):
            raise ConfigurationError("labels must lie in {-1, 0..K-1}")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("features contain NaN or Inf")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], list(self.class_names))

    def without_labels(self):
        return Dataset(self.features, np.full(len(self), UNLABELLED), list(self.class_names))


@dataclass(frozen=True)
class GroundTruth:
    """True classes of points the training path sees as unlabelled (evaluation only)."""

    labels: np.ndarray


@dataclass
class SemiUnsupervisedSplit:
    """
    Labelled/unlabelled/test data plus the augmented class layout.

    Model class slots: the semi-supervised classes occupy slots 0..k_observed-1
    in `semi_sup_classes` order; the remaining k_unobserved + k_extra slots are
    free for unsupervised classes.
    """

    labelled: Dataset
    unlabelled: Dataset
    test: Dataset
    k_observed: int
    k_unobserved: int
    k_extra: int
    prior: PriorY
    semi_sup_classes: tuple
    unsup_classes: tuple
    unlabelled_truth: GroundTruth
    validation: Dataset = None

    @property
    def k_total(self):
        return self.k_observed + self.k_unobserved + self.k_extra

    def labelled_slots(self):
        """Labelled classes translated to model class slots."""
        lookup = {c: i for i, c in enumerate(self.semi_sup_classes)}
        return np.array([lookup[int(c)] for c in self.labelled.labels], dtype=np.int64)

    def summary(self):
        return {
            "labelled": len(self.labelled),
            "unlabelled": len(self.unlabelled),
            "test": len(self.test) if self.test is not None else 0,
            "validation": len(self.validation) if self.validation is not None else 0,
            "k_total": self.k_total,
            "prior": [round(float(p), 6) for p in self.prior.probs],
        }


# ---------------------------------------------------------------------------
# IDX (MNIST) ingestion
# ---------------------------------------------------------------------------

def _read_bytes(path):
    if not os.path.exists(path):
        raise ParseError(f"File {path} not found.")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _read_header(raw, path, magic, n_dims):
    header_size = 4 * (1 + n_dims)
    if len(raw) < header_size:
        raise ParseError(f"{path}: truncated header, {len(raw)} bytes where {header_size} are needed (offset 0)")
    header = np.frombuffer(raw, dtype=">u4", count=1 + n_dims)
    if int(header[0]) != magic:
        raise ParseError(f"{path}: bad magic number 0x{int(header[0]):08x} at offset 0, expected 0x{magic:08x}")
    return [int(d) for d in header[1:]], header_size


def load_idx(images_path, labels_path):
    """
    Load an IDX image/label pair (MNIST format, optionally gzipped)

    Args:
        images_path (str): idx3 image file (magic 0x00000803)
        labels_path (str): idx1 label file (magic 0x00000801)

    Returns:
        Dataset: features [N, rows*cols] scaled to [0, 1], labels 0-9
    """
    raw_images = _read_bytes(images_path)
    (n_images, rows, cols), offset = _read_header(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    expected = n_images * rows * cols
    if len(raw_images) - offset < expected:
        raise ParseError(
            f"{images_path}: truncated pixel data at offset {len(raw_images)}, "
            f"expected {expected} bytes from offset {offset}"
        )
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=expected, offset=offset)

    raw_labels = _read_bytes(labels_path)
    (n_labels,), label_offset = _read_header(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if len(raw_labels) - label_offset < n_labels:
        raise ParseError(
            f"{labels_path}: truncated labels at offset {len(raw_labels)}, "
            f"expected {n_labels} bytes from offset {label_offset}"
        )
    if n_labels != n_images:
        raise ParseError(f"{images_path} holds {n_images} images but {labels_path} holds {n_labels} labels (offset 4)")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_labels, offset=label_offset).astype(np.int64)

    features = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels, [str(d) for d in range(10)])


# ---------------------------------------------------------------------------
# Splits and priors
# ---------------------------------------------------------------------------

def build_prior(k_semi_sup, k_unsup_total, mass_semi_sup_each, mass_unsup_each):
    """
    Class prior with equal mass per semi-supervised class and per unsupervised slot

    Args:
        k_semi_sup (int): Number of sparsely-labelled classes
        k_unsup_total (int): Unsupervised slots (vacated classes + extra classes)
        mass_semi_sup_each (float): Prior mass of each semi-supervised class
        mass_unsup_each (float): Prior mass of each unsupervised slot

    Returns:
        PriorY
    """
    if k_semi_sup < 0 or k_unsup_total < 0 or k_semi_sup + k_unsup_total < 1:
        raise ConfigurationError("prior needs at least one class", field="prior")
    semi = [float(mass_semi_sup_each)] * k_semi_sup if k_semi_sup else []
    unsup = [float(mass_unsup_each)] * k_unsup_total if k_unsup_total else []
    probs = np.array(semi + unsup, dtype=np.float64)
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"prior masses sum to {total:.12g}, expected 1", field="prior")
    return PriorY.from_probs(probs)


def carve_validation(ds, n_validation, rng):
    """Split off `n_validation` random rows; returns (remaining, validation)."""
    if n_validation <= 0:
        return ds, None
    if n_validation >= len(ds):
        raise ConfigurationError(
            f"validation size {n_validation} leaves no training data out of {len(ds)}", field="validation_size"
        )
    order = rng.permutation(len(ds))
    return ds.subset(np.sort(order[n_validation:])), ds.subset(np.sort(order[:n_validation]))


def build_semi_unsupervised_split(ds, semi_sup_classes, unsup_classes, labels_per_class, k_extra, rng,
                                  test=None, validation=None, mass_semi_sup_each=None, mass_unsup_each=None):
    """
    Build a semi-unsupervised split

    Exactly `labels_per_class` examples of every semi-supervised class are drawn
    without replacement into the labelled set. Everything else (all data of the
    unsupervised classes included) becomes unlabelled; its true classes are kept
    in `unlabelled_truth` for evaluation only.

    Default prior masses give every true class 1/K_true, shared equally by the
    unsupervised slots for the unsupervised classes (1/10 and 1/20 for the
    MNIST protocol).

    Returns:
        SemiUnsupervisedSplit
    """
    semi_sup_classes = tuple(int(c) for c in semi_sup_classes)
    unsup_classes = tuple(int(c) for c in unsup_classes)
    if set(semi_sup_classes) & set(unsup_classes):
        raise ConfigurationError("semi-supervised and unsupervised class sets overlap", field="unsup_classes")
    if labels_per_class < 0 or k_extra < 0:
        raise ConfigurationError("labels_per_class and k_extra must be >= 0")

    labelled_idx = []
    if labels_per_class > 0:
        for c in semi_sup_classes:
            candidates = np.flatnonzero(ds.labels == c)
            if candidates.size < labels_per_class:
                raise ConfigurationError(
                    f"class {c} has {candidates.size} examples, {labels_per_class} labels requested",
                    field="labels_per_class",
                )
            labelled_idx.append(np.sort(rng.choice(candidates, size=labels_per_class, replace=False)))
    labelled_idx = np.concatenate(labelled_idx) if labelled_idx else np.zeros(0, dtype=np.int64)

    is_unlabelled = np.ones(len(ds), dtype=bool)
    is_unlabelled[labelled_idx] = False
    unlabelled_idx = np.flatnonzero(is_unlabelled)
    unlabelled = ds.subset(unlabelled_idx)

    n_semi, n_unsup = len(semi_sup_classes), len(unsup_classes)
    k_true = n_semi + n_unsup
    if mass_semi_sup_each is None:
        mass_semi_sup_each = 1.0 / k_true if k_true else 0.0
    if mass_unsup_each is None:
        mass_unsup_each = (1.0 - n_semi * mass_semi_sup_each) / max(n_unsup + k_extra, 1)
    prior = build_prior(n_semi, n_unsup + k_extra, mass_semi_sup_each, mass_unsup_each)

    return SemiUnsupervisedSplit(
        labelled=ds.subset(labelled_idx),
        unlabelled=unlabelled.without_labels(),
        test=test,
        k_observed=n_semi,
        k_unobserved=n_unsup,
        k_extra=int(k_extra),
        prior=prior,
        semi_sup_classes=semi_sup_classes,
        unsup_classes=unsup_classes,
        unlabelled_truth=GroundTruth(unlabelled.labels.copy()),
        validation=validation,
    )


def binarize(x, rng):
    """Bernoulli resampling of intensities in [0, 1]."""
    return (rng.random(x.shape) < x).astype(x.dtype)


# ---------------------------------------------------------------------------
# Activity label dictionary
# ---------------------------------------------------------------------------

@dataclass
class LabelDictionary:
    """Fine-grained activity codes mapped to coarse classes; unmapped codes are unlabelled."""

    mapping: dict
    class_names: list
    descriptions: dict = field(default_factory=dict)
    proportions: dict = field(default_factory=dict)

    def class_index(self, name):
        return self.class_names.index(name)

    def class_proportions(self):
        """Per-class share of the labelled data (percent), summed over its codes."""
        totals = {name: 0.0 for name in self.class_names}
        for code, name in self.mapping.items():
            totals[name] += self.proportions.get(code, 0.0)
        return totals


def load_label_dictionary(path=DEFAULT_DICTIONARY_PATH):
    """
    Read a dictionary table with columns class_name, code (and optionally
    description, proportion). Class order is order of first appearance.
    """
    table = read_csv(path, dtype={"code": str})
    table["code"] = table["code"].astype(str).str.strip()
    missing = {"class_name", "code"} - set(table.columns)
    if missing:
        raise ParseError(f"{path}: missing columns {sorted(missing)}")

    mapping, class_names, descriptions, proportions = {}, [], {}, {}
    for row in table.itertuples(index=False):
        code, name = str(row.code), str(row.class_name).strip()
        if code in mapping and mapping[code] != name:
            raise ConfigurationError(f"code {code} maps to both '{mapping[code]}' and '{name}'", field="dictionary")
        mapping[code] = name
        if name not in class_names:
            class_names.append(name)
        if "description" in table.columns:
            descriptions[code] = str(row.description)
        if "proportion" in table.columns:
            proportions[code] = float(row.proportion)
    return LabelDictionary(mapping, class_names, descriptions, proportions)


def label_dictionary_map(raw_labels, dictionary):
    """Map raw codes to coarse class indices; codes not in the dictionary become -1."""
    index = {name: i for i, name in enumerate(dictionary.class_names)}
    return np.array(
        [index[dictionary.mapping[str(code).strip()]] if str(code).strip() in dictionary.mapping else UNLABELLED
         for code in raw_labels],
        dtype=np.int64,
    )


def dictionary_class_weights(dictionary=None):
    """Class names and normalised weights from the dictionary proportions."""
    dictionary = dictionary or load_label_dictionary()
    proportions = dictionary.class_proportions()
    names = list(dictionary.class_names)
    weights = np.array([proportions[n] for n in names], dtype=np.float64)
    return names, weights / weights.sum()


# ---------------------------------------------------------------------------
# Synthetic windowed-features dataset
# ---------------------------------------------------------------------------

def synthetic_activity_dataset(n_windows, n_classes, d_features=126, rng=None, class_weights=None,
                               separation=0.5, class_names=None):
    """
    Draw a class per window from `class_weights`, then features from that class's
    diagonal Gaussian. Class means ~ N(0, separation^2) and standard deviations
    ~ U(0.5, 1.5) are drawn once per class.

    Returns:
        tuple: (Dataset with true labels, ground-truth label vector)
    """
    if n_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {n_classes}", field="synthetic_classes")
    if n_windows < 1 or d_features < 1:
        raise ConfigurationError("n_windows and d_features must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    if class_weights is None:
        class_weights = np.ones(n_classes)
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (n_classes,) or np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ConfigurationError("class_weights must be positive, one per class", field="synthetic_class_weights")
    weights = weights / weights.sum()

    means = rng.normal(0.0, separation, size=(n_classes, d_features))
    stds = rng.uniform(0.5, 1.5, size=(n_classes, d_features))
    labels = rng.choice(n_classes, size=n_windows, p=weights)
    features = means[labels] + stds[labels] * rng.standard_normal((n_windows, d_features))

    names = list(class_names) if class_names else [f"class_{i}" for i in range(n_classes)]
    return Dataset(features, labels, names), labels.copy()


def export_dataset_csv(ds, path):
    """One row per window: feature columns f0..f{D-1}, final column `class`."""
    frame = pd.DataFrame(ds.features, columns=[f"f{i}" for i in range(ds.n_features)])
    frame["class"] = ds.labels
    return write_csv(frame, path)


def load_dataset_csv(path, class_names=None):
    """Read a CSV in the export format; class -1 marks rows without a label."""
    frame = read_csv(path)
    if frame.shape[1] < 2:
        raise ParseError(f"{path}: need at least one feature column and a class column")
    labels = frame.iloc[:, -1].to_numpy(dtype=np.int64)
    features = frame.iloc[:, :-1].to_numpy(dtype=np.float64)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    names = list(class_names) if class_names else [f"class_{i}" for i in range(n_classes)]
    return Dataset(features, labels, names)


# ---------------------------------------------------------------------------
# Standardisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def inverse(self, features):
        return features * self.std + self.mean


def fit_feature_stats(ds):
    """Per-feature mean and standard deviation; variances are floored at 1e-8."""
    mean = ds.features.mean(axis=0)
    var = ds.features.var(axis=0)
    floored = var < VARIANCE_FLOOR
    if np.any(floored):
        message = f"{int(floored.sum())} zero-variance feature(s) floored at variance {VARIANCE_FLOOR}"
        warnings.warn(message, RuntimeWarning, stacklevel=2)
        warn_status(message)
        var = np.maximum(var, VARIANCE_FLOOR)
    return FeatureStats(mean, np.sqrt(var))


def standardize_features(ds, stats=None):
    """Zero-mean, unit-variance features under `stats` (fit on ds itself when omitted)."""
    stats = stats if stats is not None else fit_feature_stats(ds)
    return Dataset((ds.features - stats.mean) / stats.std, ds.labels, list(ds.class_names))
