import os

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import calinski_harabasz_score

from gm_dgm import evaluation
from gm_dgm.data import Dataset
from gm_dgm.errors import ContractError, UndefinedScoreError
from gm_dgm.models import ModelKind, PriorY

from .conftest import make_toy_params


def test_attribution_picks_the_modal_true_class():
    pred = np.array([0, 0, 0, 1, 1, 3])
    truth = np.array([2, 2, 1, 0, 0, 1])
    assert evaluation.attribute_clusters(pred, truth, k_total=4) == {0: 2, 1: 0, 2: None, 3: 1}


def test_attribution_ties_go_to_the_lower_class():
    assert evaluation.attribute_clusters(np.array([0, 0]), np.array([3, 1]))[0] == 1


def test_several_predicted_classes_may_share_a_true_class():
    pred = np.array([0, 1, 2, 2])
    truth = np.array([0, 0, 1, 1])
    attribution = evaluation.attribute_clusters(pred, truth)
    confusion, accuracy = evaluation.confusion_and_accuracy(pred, truth, attribution)
    assert attribution == {0: 0, 1: 0, 2: 1}
    assert accuracy == 1.0
    assert np.array_equal(confusion, [[2, 0], [0, 2]])


def test_confusion_rows_sum_to_true_class_counts(rng):
    truth = rng.integers(0, 4, 200)
    pred = rng.integers(0, 6, 200)
    attribution = evaluation.attribute_clusters(pred, truth, 6)
    confusion, accuracy = evaluation.confusion_and_accuracy(pred, truth, attribution, k_true=4)
    assert np.array_equal(confusion.sum(axis=1), np.bincount(truth, minlength=4))
    assert accuracy == pytest.approx(np.trace(confusion) / 200)


def test_constant_prediction_scores_the_majority_share():
    truth = np.array([0, 0, 0, 1, 2])
    pred = np.zeros(5, dtype=int)
    assert evaluation.cluster_accuracy(pred, truth) == pytest.approx(0.6)


def test_uncovered_predicted_class_is_a_contract_error():
    with pytest.raises(ContractError):
        evaluation.confusion_and_accuracy(np.array([0, 1]), np.array([0, 1]), {0: 0, 1: None})


def _brute_force_ch(points, ids):
    centre = points.mean(axis=0)
    labels = np.unique(ids)
    between = within = 0.0
    for c in labels:
        members = points[ids == c]
        mean_c = members.mean(axis=0)
        between += members.shape[0] * np.sum((mean_c - centre) ** 2)
        within += np.sum((members - mean_c) ** 2)
    n, k = points.shape[0], labels.size
    return (between / (k - 1)) / (within / (n - k))


def test_calinski_harabasz_matches_brute_force_and_sklearn(rng):
    for _ in range(50):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(k + 1, 31))
        ids = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, n - k)]))
        points = rng.standard_normal((n, int(rng.integers(1, 4))))
        score = evaluation.calinski_harabasz(points, ids)
        assert score == pytest.approx(_brute_force_ch(points, ids), rel=1e-9, abs=1e-12)
        assert score == pytest.approx(calinski_harabasz_score(points, ids), rel=1e-12)


def test_calinski_harabasz_invariances(rng):
    points = rng.standard_normal((30, 2))
    ids = rng.integers(0, 3, 30)
    score = evaluation.calinski_harabasz(points, ids)
    assert evaluation.calinski_harabasz(points, (ids + 5) * 2) == pytest.approx(score)
    assert evaluation.calinski_harabasz(points * 3.0 + 7.0, ids) == pytest.approx(score)


@pytest.mark.parametrize("points, ids", [
    (np.zeros((5, 2)) + np.arange(5)[:, None], np.zeros(5)),
    (np.arange(6.0).reshape(3, 2), np.array([0, 1, 2])),
    (np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]), np.array([0, 0, 1, 1])),
], ids=["one-cluster", "as-many-clusters-as-points", "zero-within"])
def test_calinski_harabasz_undefined_cases(points, ids):
    with pytest.raises(UndefinedScoreError):
        evaluation.calinski_harabasz(points, ids)


def test_collapse_to_the_prior_is_flagged():
    prior = PriorY.from_probs([0.25] * 4)
    report = evaluation.collapse_diagnostic(np.full((50, 4), 0.25), prior)
    assert report.prior_collapse
    assert report.kl_to_prior == pytest.approx(0.0, abs=1e-12)
    assert report.mean_entropy == pytest.approx(np.log(4))


def test_one_class_collapse_is_flagged():
    probs = np.tile([0.9, 0.05, 0.05], (100, 1))
    report = evaluation.collapse_diagnostic(probs, PriorY.from_probs([1 / 3] * 3))
    assert report.one_class_collapse and not report.prior_collapse
    assert report.flags() == ["one-class-collapse"]
    assert report.class_usage.tolist() == [100, 0, 0]


def test_confident_balanced_predictions_raise_no_flag():
    probs = np.repeat(np.eye(3) * 0.97 + 0.01, 20, axis=0)
    report = evaluation.collapse_diagnostic(probs, PriorY.from_probs([1 / 3] * 3))
    assert report.flags() == []


def test_composition_counts_true_classes_per_predicted_class():
    frame = evaluation.cluster_composition(np.array([0, 0, 2, 2, 2]), np.array([1, 0, 1, 1, -1]), 3, ["a", "b"])
    assert list(frame.columns) == ["a", "b", "unlabelled"]
    assert frame.index.tolist() == [0, 2]
    assert frame.loc[2].tolist() == [0, 2, 1]


def _toy_dataset(rng, n=60):
    return Dataset(rng.uniform(0, 1, (n, 5)), rng.integers(0, 3, n), ["a", "b", "c"])


def test_export_latents_shapes(rng):
    params = make_toy_params(ModelKind.GMDGM)
    latents, pred = evaluation.export_latents(params, _toy_dataset(rng), batch_size=16)
    assert latents.shape == (60, 2)
    assert pred.shape == (60,) and pred.max() < 3


def test_evaluate_writes_exactly_the_three_report_files(rng, tmp_path):
    params = make_toy_params(ModelKind.M2)
    ds = _toy_dataset(rng)
    with pytest.warns(UserWarning, match="attributed on the evaluation set"):
        report = evaluation.evaluate(params, ds, batch_size=16)
    assert report.confusion.shape == (3, 3)
    assert 0.0 <= report.accuracy <= 1.0
    evaluation.write_eval_report(report, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == sorted(evaluation.REPORT_FILES)

    latents = pd.read_csv(tmp_path / "latents.csv")
    assert list(latents.columns) == ["z0", "z1", "predicted_class", "true_class"]
    confusion = pd.read_csv(tmp_path / "confusion.csv", index_col="true_class")
    assert confusion.to_numpy().sum() == 60
    metrics = (tmp_path / "metrics.txt").read_text()
    assert "accuracy=" in metrics and "model_kind=m2" in metrics


def test_evaluate_with_a_separate_attribution_set(rng):
    params = make_toy_params(ModelKind.GMDGM)
    report = evaluation.evaluate(params, _toy_dataset(rng), attribution_ds=_toy_dataset(rng, n=200), batch_size=32)
    assert report.attribution_set == "validation"
    used = np.unique(report.predicted)
    assert all(report.attribution[int(c)] is not None for c in used)


def test_attributed_accuracy_never_falls_below_the_modal_class_share(rng):
    for _ in range(20):
        truth = rng.integers(0, 5, 80)
        pred = rng.integers(0, 7, 80)
        assert evaluation.cluster_accuracy(pred, truth, 7) >= np.bincount(truth).max() / 80
