"""
Experiments

Builds datasets and the semi-unsupervised split from an ExperimentConfig, trains
the configured model `repeats` times (seed_i = seed + i) on one shared split,
records the best run, and evaluates checkpoints.

Run directory layout:
    <out_dir>/resolved_config.cfg
    <out_dir>/best_run.txt
    <out_dir>/run_00/{history.csv, state.npz, state.json, checkpoints/}
"""

import os
from dataclasses import dataclass

import numpy as np

from .config import RESOLVED_CONFIG, load_config
from .data import (
    dictionary_class_weights,
    build_semi_unsupervised_split,
    carve_validation,
    fit_feature_stats,
    load_dataset_csv,
    load_idx,
    standardize_features,
    synthetic_activity_dataset,
)
from .errors import CheckpointError, ConfigurationError
from .evaluation import evaluate, print_eval_summary, write_eval_report
from .models import load_checkpoint
from .training import train
from .utils import format_duration, status, timed, write_key_values

BEST_RUN_FILE = "best_run.txt"


@dataclass
class ExperimentData:
    train: object
    test: object
    validation: object = None


def _mnist_path(cfg, name):
    path = name if os.path.isabs(name) else os.path.join(cfg.mnist_dir, name)
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        return path + ".gz"
    return path


def _holdout(ds, fraction, rng):
    order = rng.permutation(len(ds))
    n_test = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def build_datasets(cfg, rng):
    """
    Load or generate the data named by `cfg.dataset` and split off test and validation sets

    Features of synthetic/CSV data are standardised with statistics of the
    training part only.
    """
    if cfg.dataset == "mnist":
        status(f"📥 Loading MNIST from {cfg.mnist_dir}")
        train_ds = load_idx(_mnist_path(cfg, cfg.mnist_train_images), _mnist_path(cfg, cfg.mnist_train_labels))
        test_ds = load_idx(_mnist_path(cfg, cfg.mnist_test_images), _mnist_path(cfg, cfg.mnist_test_labels))
        if cfg.train_subset and cfg.train_subset < len(train_ds):
            train_ds = train_ds.subset(np.sort(rng.choice(len(train_ds), cfg.train_subset, replace=False)))
    else:
        if cfg.dataset == "synthetic":
            names, weights = dictionary_class_weights()
            if cfg.synthetic_class_weights:
                weights = np.asarray(cfg.synthetic_class_weights)
            if len(names) != cfg.synthetic_classes:
                names = None
                if not cfg.synthetic_class_weights:
                    weights = None
            status(f"🧪 Generating {cfg.synthetic_windows} synthetic windows over {cfg.synthetic_classes} classes")
            full, _ = synthetic_activity_dataset(
                cfg.synthetic_windows, cfg.synthetic_classes, cfg.synthetic_features, rng,
                class_weights=weights, separation=cfg.synthetic_separation, class_names=names,
            )
        else:
            status(f"📥 Loading {cfg.csv_path}")
            full = load_dataset_csv(cfg.csv_path)
        train_ds, test_ds = _holdout(full, cfg.test_fraction, rng)

    train_ds, validation = carve_validation(train_ds, cfg.validation_size, rng)
    if cfg.resolved_standardize:
        stats = fit_feature_stats(train_ds)
        train_ds = standardize_features(train_ds, stats)
        test_ds = standardize_features(test_ds, stats)
        validation = standardize_features(validation, stats) if validation is not None else None
    return ExperimentData(train_ds, test_ds, validation)


def build_split(cfg, data, rng):
    n_classes = len(data.train.class_names) or int(data.train.labels.max()) + 1
    for c in (*cfg.semi_sup_classes, *cfg.unsup_classes):
        if not 0 <= c < n_classes:
            raise ConfigurationError(f"class {c} does not exist in a {n_classes}-class dataset",
                                     field="semi_sup_classes")
    return build_semi_unsupervised_split(
        data.train, cfg.semi_sup_classes, cfg.unsup_classes, cfg.labels_per_class, cfg.k_extra, rng,
        test=data.test, validation=data.validation,
        mass_semi_sup_each=cfg.prior_semi_sup_mass, mass_unsup_each=cfg.prior_unsup_mass,
    )


def prepare(cfg):
    """Datasets and split for a config; identical for every repeat of one experiment."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    data = build_datasets(cfg, rng)
    split = build_split(cfg, data, rng)
    summary = split.summary()
    status(f"🧩 Split: {summary['labelled']} labelled, {summary['unlabelled']} unlabelled, "
           f"{summary['validation']} validation, {summary['test']} test, K_total={summary['k_total']}")
    return data, split


def run_dir(cfg, index):
    return os.path.join(cfg.out_dir, f"run_{index:02d}")


def select_best_run(results):
    """Names of the best runs by validation ELBO and by validation accuracy."""
    def best_by(key):
        scored = [(name, getattr(r, key)) for name, r in results.items() if np.isfinite(getattr(r, key))]
        return max(scored, key=lambda item: item[1])[0] if scored else ""
    return {"best_by_val_elbo": best_by("best_val_elbo"), "best_by_val_accuracy": best_by("best_val_accuracy")}


def write_best_run(results, out_dir):
    summary = select_best_run(results)
    for name, r in results.items():
        summary[f"{name}_seed"] = r.seed
        summary[f"{name}_best_epoch"] = r.best_epoch
        summary[f"{name}_val_elbo"] = float(r.best_val_elbo)
        summary[f"{name}_val_accuracy"] = float(r.best_val_accuracy)
    write_key_values(summary, os.path.join(out_dir, BEST_RUN_FILE), header="Best run of this experiment")
    return summary


def run_experiment(cfg, resume=False):
    """
    Train `cfg.repeats` runs and write best_run.txt

    Returns:
        dict: run name -> TrainResult
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.write_resolved(cfg.out_dir)
    _, split = prepare(cfg)

    results = {}
    with timed() as elapsed:
        for i in range(cfg.repeats):
            seed = cfg.seed + i
            name = os.path.basename(run_dir(cfg, i))
            status(f"\n🏃 Run {i + 1}/{cfg.repeats} ({cfg.model.value}, seed {seed})")
            directory = run_dir(cfg, i)
            can_resume = resume and os.path.exists(os.path.join(directory, "state.json"))
            results[name] = train(split, cfg.train_config(seed), directory, resume=can_resume)

    summary = write_best_run(results, cfg.out_dir)
    status(f"\n✅ {cfg.repeats} run(s) completed in {format_duration(elapsed())}")
    status(f"  Best by validation ELBO:     {summary['best_by_val_elbo'] or 'n/a'}")
    status(f"  Best by validation accuracy: {summary['best_by_val_accuracy'] or 'n/a'}")
    return results


def resume_experiment(directory, overrides=None):
    """Continue every run of an experiment directory from its saved state."""
    path = os.path.join(directory, RESOLVED_CONFIG)
    if not os.path.exists(path):
        raise ConfigurationError(f"{directory} holds no {RESOLVED_CONFIG}", field="resume")
    cfg = load_config(path, overrides)
    return run_experiment(cfg, resume=True)


def evaluate_checkpoint(cfg, checkpoint, out_dir, expected_kind=None):
    """
    Evaluate a checkpoint on the test set of the config's data

    Args:
        cfg (ExperimentConfig): Config the checkpoint was trained with
        checkpoint (str): Checkpoint stem or manifest path
        out_dir (str): Directory for metrics.txt, confusion.csv and latents.csv
        expected_kind (ModelKind): Reject checkpoints of another model kind

    Returns:
        EvalReport
    """
    params, manifest = load_checkpoint(checkpoint)
    if expected_kind is not None and params.kind != expected_kind:
        raise CheckpointError(
            f"{checkpoint} holds a {params.kind.value} model, {expected_kind.value} was requested"
        )
    data, split = prepare(cfg)
    if params.arch.x_dim != data.test.n_features or params.arch.k_total != split.k_total:
        raise CheckpointError(
            f"{checkpoint} expects x_dim={params.arch.x_dim}, K={params.arch.k_total}; "
            f"data has x_dim={data.test.n_features}, K={split.k_total}"
        )
    attribution_ds = data.validation if cfg.attribution_set == "validation" else None
    report = evaluate(params, data.test, split.prior, attribution_ds, cfg.eval_batch_size)
    report.metadata.update({"checkpoint": os.path.abspath(checkpoint), "epoch": manifest.get("epoch", "")})
    write_eval_report(report, out_dir)
    print_eval_summary(report)
    return report
