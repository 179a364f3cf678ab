"""
Semi-Unsupervised Evaluation

Learned classes are attributed to the most common true class among their
members; accuracy and the confusion matrix are computed after attribution.
Structure in latent space is scored with Calinski-Harabasz on recognition means
grouped by predicted class, and a collapse diagnostic flags the two failure
modes of unsupervised q(y|x): collapsing to the prior and mapping every point
to one class.
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import calinski_harabasz_score

from . import autodiff as ad
from .errors import ContractError, UndefinedScoreError
from .models import predict_proba, q_z_given_xy
from .utils import status, warn_status, write_csv, write_key_values

PRIOR_COLLAPSE_KL = 0.01
PRIOR_COLLAPSE_ENTROPY_FRACTION = 0.9
ONE_CLASS_COLLAPSE_FRACTION = 0.95
REPORT_FILES = ("metrics.txt", "confusion.csv", "latents.csv")


def attribute_clusters(pred, truth, k_total=None):
    """
    Map every predicted class to the modal true class among its members

    Args:
        pred (np.ndarray): Predicted class slots in [0, k_total)
        truth (np.ndarray): True classes (>= 0)
        k_total (int): Number of predicted classes (inferred when omitted)

    Returns:
        dict: predicted class -> true class, or None for classes no point uses.
            Ties go to the lower true class index.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractError(f"pred has {pred.size} entries, truth {truth.size}")
    k_total = int(k_total) if k_total is not None else int(pred.max(initial=-1)) + 1
    k_true = int(truth.max(initial=-1)) + 1
    attribution = {}
    for c in range(k_total):
        members = truth[pred == c]
        attribution[c] = int(np.argmax(np.bincount(members, minlength=k_true))) if members.size else None
    return attribution


def confusion_and_accuracy(pred, truth, attribution, k_true=None):
    """
    Confusion matrix over true classes after attribution, plus accuracy

    Rows are true classes and columns attributed predictions, so row sums are
    true-class counts.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    k_true = int(k_true) if k_true is not None else int(truth.max(initial=-1)) + 1
    used = np.unique(pred)
    missing = [int(c) for c in used if attribution.get(int(c)) is None]
    if missing:
        raise ContractError(f"attribution does not cover predicted classes {missing}")
    mapped = np.array([attribution[int(c)] for c in pred], dtype=np.int64)
    confusion = np.zeros((k_true, k_true), dtype=np.int64)
    np.add.at(confusion, (truth, mapped), 1)
    accuracy = float(np.trace(confusion) / truth.size) if truth.size else float("nan")
    return confusion, accuracy


def cluster_accuracy(pred, truth, k_total=None):
    """Accuracy with the attribution fitted on the same points."""
    attribution = attribute_clusters(pred, truth, k_total)
    return confusion_and_accuracy(pred, truth, attribution)[1]


def calinski_harabasz(points, cluster_ids):
    """
    Calinski-Harabasz score: [tr(B) / (k - 1)] / [tr(W) / (N - k)]

    Raises:
        UndefinedScoreError: fewer than 2 clusters, N <= k, or zero within-cluster dispersion
    """
    points = np.asarray(points, dtype=np.float64)
    cluster_ids = np.asarray(cluster_ids)
    n = points.shape[0]
    labels, inverse = np.unique(cluster_ids, return_inverse=True)
    k = labels.size
    if k < 2:
        raise UndefinedScoreError(f"Calinski-Harabasz needs at least 2 clusters, got {k}")
    if n <= k:
        raise UndefinedScoreError(f"Calinski-Harabasz needs more points ({n}) than clusters ({k})")
    centroids = pd.DataFrame(points).groupby(inverse).mean().to_numpy()
    within = float(np.sum((points - centroids[inverse]) ** 2))
    if within == 0.0:
        raise UndefinedScoreError("within-cluster dispersion is zero")
    return float(calinski_harabasz_score(points, inverse))


@dataclass
class CollapseReport:
    mean_entropy: float
    kl_to_prior: float
    modal_fraction: float
    class_usage: np.ndarray
    prior_collapse: bool
    one_class_collapse: bool

    def flags(self):
        return [name for name, raised in (("prior-collapse", self.prior_collapse),
                                          ("one-class-collapse", self.one_class_collapse)) if raised]


def collapse_diagnostic(q_y_probs, prior):
    """
    Detect the two collapse modes of q(y|x)

    Args:
        q_y_probs (np.ndarray | Categorical): [N, K] class probabilities
        prior (PriorY): p(y)

    Returns:
        CollapseReport: mean entropy, KL(aggregate q(y) || p(y)), modal-class
            fraction and the usage histogram of argmax predictions
    """
    probs = q_y_probs.probs if hasattr(q_y_probs, "probs") else np.asarray(q_y_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("collapse_diagnostic needs a non-empty [N, K] batch")
    k = probs.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    mean_entropy = float(-plogp.sum(axis=1).mean())

    aggregate = probs.mean(axis=0)
    with np.errstate(divide="ignore"):
        terms = np.where(aggregate > 0, aggregate * (np.log(np.where(aggregate > 0, aggregate, 1.0)) - prior.log_pi), 0.0)
    kl = float(max(terms.sum(), 0.0))

    usage = np.bincount(np.argmax(probs, axis=1), minlength=k)
    modal_fraction = float(usage.max() / usage.sum())
    return CollapseReport(
        mean_entropy=mean_entropy,
        kl_to_prior=kl,
        modal_fraction=modal_fraction,
        class_usage=usage,
        prior_collapse=kl < PRIOR_COLLAPSE_KL and mean_entropy > PRIOR_COLLAPSE_ENTROPY_FRACTION * np.log(k),
        one_class_collapse=modal_fraction > ONE_CLASS_COLLAPSE_FRACTION,
    )


def export_latents(params, ds, batch_size=1000):
    """
    Recognition means mu(x, y_hat) with y_hat = argmax q(y|x)

    Returns:
        tuple: (latents [N, z_dim], predicted classes [N])
    """
    features = ds.features if hasattr(ds, "features") else np.asarray(ds)
    probs = predict_proba(params, features, batch_size)
    pred = np.argmax(probs, axis=1)
    latents = []
    with ad.no_grad():
        for start in range(0, features.shape[0], batch_size):
            stop = start + batch_size
            q = q_z_given_xy(params, features[start:stop], pred[start:stop])
            latents.append(q.mu.data.astype(np.float64))
    if not latents:
        return np.zeros((0, params.arch.z_dim)), pred
    return np.concatenate(latents, axis=0), pred


def cluster_composition(pred, truth, k_total, class_names=None):
    """
    Counts of each true class inside each used predicted class.

    Returns a DataFrame indexed by predicted class; unlabelled points (-1) are
    counted in an "unlabelled" column.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    k_true = int(truth.max(initial=-1)) + 1
    names = list(class_names) if class_names else [str(c) for c in range(k_true)]
    names = names + [str(c) for c in range(len(names), k_true)]
    labels = np.where(truth >= 0, truth, k_true)
    counts = np.zeros((k_total, k_true + 1), dtype=np.int64)
    np.add.at(counts, (pred, labels), 1)
    frame = pd.DataFrame(counts, columns=names[:k_true] + ["unlabelled"])
    frame.index.name = "predicted_class"
    if not np.any(truth < 0):
        frame = frame.drop(columns="unlabelled")
    return frame[frame.sum(axis=1) > 0]


@dataclass
class EvalReport:
    confusion: np.ndarray
    attribution: dict
    accuracy: float
    ch_score: float
    collapse: CollapseReport
    class_names: list
    composition: pd.DataFrame
    latents: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray
    attribution_set: str = "test"
    metadata: dict = field(default_factory=dict)

    def metrics(self):
        """Flat key/value metrics, as written to metrics.txt."""
        metrics = dict(self.metadata)
        metrics.update({
            "n_points": int(self.truth.size),
            "accuracy": self.accuracy,
            "ch_score": self.ch_score,
            "attribution_set": self.attribution_set,
            "attribution": ",".join(f"{c}:{'unused' if t is None else t}" for c, t in self.attribution.items()),
            "mean_entropy_q_y": self.collapse.mean_entropy,
            "kl_aggregate_q_y_prior": self.collapse.kl_to_prior,
            "modal_class_fraction": self.collapse.modal_fraction,
            "class_usage": [int(u) for u in self.collapse.class_usage],
            "prior_collapse": self.collapse.prior_collapse,
            "one_class_collapse": self.collapse.one_class_collapse,
        })
        for slot, row in self.composition.iterrows():
            parts = [f"{name}:{int(count)}" for name, count in row.items() if count]
            metrics[f"composition_{slot}"] = ",".join(parts)
        return metrics


def evaluate(params, ds, prior=None, attribution_ds=None, batch_size=1000):
    """
    Evaluate a trained model on a labelled dataset

    Args:
        params (ModelParams): Trained model
        ds (Dataset): Points to score, with true classes (-1 rows are only used
            for the latent structure score and composition)
        prior (PriorY): Class prior for the collapse diagnostic (params.prior when omitted)
        attribution_ds (Dataset): Attribute learned classes on this set instead of ds
        batch_size (int): Evaluation batch size

    Returns:
        EvalReport
    """
    prior = prior if prior is not None else params.prior
    k_total = params.arch.k_total
    latents, pred = export_latents(params, ds, batch_size)
    probs = predict_proba(params, ds.features, batch_size)
    truth = ds.labels
    labelled = truth >= 0
    k_true = len(ds.class_names) if ds.class_names else int(truth.max(initial=-1)) + 1

    if attribution_ds is None:
        message = "clusters are attributed on the evaluation set itself; the accuracy reuses its labels"
        warnings.warn(message, UserWarning, stacklevel=2)
        warn_status(message)
        attribution = attribute_clusters(pred[labelled], truth[labelled], k_total)
        attribution_set = "test"
    else:
        keep = attribution_ds.labels >= 0
        attribution_pred = np.argmax(predict_proba(params, attribution_ds.features[keep], batch_size), axis=1)
        attribution = attribute_clusters(attribution_pred, attribution_ds.labels[keep], k_total)
        fallback = attribute_clusters(pred[labelled], truth[labelled], k_total)
        uncovered = [c for c in np.unique(pred[labelled]) if attribution[int(c)] is None]
        if uncovered:
            warn_status(f"classes {uncovered} unused on the attribution set; attributed on the evaluation set")
            for c in uncovered:
                attribution[int(c)] = fallback[int(c)]
        attribution_set = "validation"

    confusion, accuracy = confusion_and_accuracy(pred[labelled], truth[labelled], attribution, k_true)
    try:
        ch_score = calinski_harabasz(latents, pred)
    except UndefinedScoreError as e:
        warn_status(f"Calinski-Harabasz undefined: {e}")
        ch_score = float("nan")

    return EvalReport(
        confusion=confusion,
        attribution=attribution,
        accuracy=accuracy,
        ch_score=ch_score,
        collapse=collapse_diagnostic(probs, prior),
        class_names=list(ds.class_names) or [str(c) for c in range(k_true)],
        composition=cluster_composition(pred, truth, k_total, ds.class_names),
        latents=latents,
        predicted=pred,
        truth=truth,
        attribution_set=attribution_set,
        metadata={"model_kind": params.kind.value, "k_total": k_total},
    )


def write_eval_report(report, out_dir):
    """Write metrics.txt, confusion.csv and latents.csv into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    write_key_values(report.metrics(), os.path.join(out_dir, "metrics.txt"), header="Evaluation report")

    confusion = pd.DataFrame(report.confusion, index=report.class_names, columns=report.class_names)
    confusion.index.name = "true_class"
    write_csv(confusion, os.path.join(out_dir, "confusion.csv"), index=True)

    latents = pd.DataFrame(report.latents, columns=[f"z{i}" for i in range(report.latents.shape[1])])
    latents["predicted_class"] = report.predicted
    latents["true_class"] = report.truth
    write_csv(latents, os.path.join(out_dir, "latents.csv"))
    return [os.path.join(out_dir, name) for name in REPORT_FILES]


def print_eval_summary(report):
    status("\n📊 Evaluation Summary")
    status(f"  Points:            {report.truth.size}")
    status(f"  Accuracy:          {report.accuracy:.4f} (attributed on {report.attribution_set})")
    status(f"  Calinski-Harabasz: {report.ch_score:.2f}")
    status(f"  Mean H[q(y|x)]:    {report.collapse.mean_entropy:.4f}")
    status(f"  KL(q(y) || p(y)):  {report.collapse.kl_to_prior:.4f}")
    for flag in report.collapse.flags():
        warn_status(f"{flag} detected")
