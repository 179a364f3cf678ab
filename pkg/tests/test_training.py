import os

import numpy as np
import pytest

from gm_dgm import autodiff as ad
from gm_dgm import models, training
from gm_dgm.data import Dataset, build_semi_unsupervised_split, synthetic_activity_dataset
from gm_dgm.errors import NonFiniteGradientError, TrainingDivergedError
from gm_dgm.training import AdamState, TrainConfig, adam_step

from .conftest import make_toy_config, make_toy_split


def _param(values, name="w"):
    return ad.Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def test_adam_leaves_parameters_alone_on_zero_gradient():
    p = _param([1.0, -2.0])
    state = AdamState.init([p], lr=0.1)
    adam_step(state, [p], [np.zeros(2)])
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_moves_by_lr_against_the_gradient_sign():
    p = _param([0.0, 0.0, 0.0])
    state = AdamState.init([p], lr=0.01)
    adam_step(state, [p], [np.array([3.0, -0.5, 1e-3])])
    assert np.allclose(p.data, [-0.01, 0.01, -0.01], atol=1e-6)


def test_adam_rejects_non_finite_gradients_by_name():
    p = _param([0.0, 0.0], name="decoder.W0")
    state = AdamState.init([p])
    with pytest.raises(NonFiniteGradientError, match="decoder.W0"):
        adam_step(state, [p], [np.array([1.0, np.nan])])
    assert np.array_equal(p.data, [0.0, 0.0])
    assert state.t == 0


def test_adam_is_deterministic():
    runs = []
    for _ in range(2):
        p = _param([0.5, 1.5])
        state = AdamState.init([p], lr=0.05)
        for g in ([1.0, -1.0], [0.3, 0.2], [-2.0, 0.1]):
            adam_step(state, [p], [np.array(g)])
        runs.append(p.data.copy())
    assert np.array_equal(runs[0], runs[1])


def mnist_sized_split():
    labels = np.repeat(np.arange(10), 5500)
    features = np.column_stack([np.arange(labels.size, dtype=np.float64), np.zeros(labels.size)])
    ds = Dataset(features, labels)
    return build_semi_unsupervised_split(ds, (0, 1, 2, 3, 4), (5, 6, 7, 8, 9), 100, 0, np.random.default_rng(0))


def test_interleave_visits_unlabelled_once_and_recycles_labelled():
    split = mnist_sized_split()
    assert (len(split.labelled), len(split.unlabelled)) == (500, 54_500)
    cfg = TrainConfig(batch_size_labelled=100, batch_size_unlabelled=100)
    assert training.steps_per_epoch(split, cfg) == 545

    seen_u, seen_l, steps = [], [], 0
    for labelled, x_u in training.minibatch_interleave(split, cfg, np.random.default_rng(0)):
        steps += 1
        seen_u.append(x_u[:, 0])
        seen_l.append(labelled[0][:, 0])
        assert labelled[0].shape[0] == 100
    assert steps == 545
    assert np.array_equal(np.sort(np.concatenate(seen_u)), np.sort(split.unlabelled.features[:, 0]))
    _, counts = np.unique(np.concatenate(seen_l), return_counts=True)
    assert counts.size == 500 and np.all(counts == 109)


def test_interleave_without_labels_yields_no_labelled_batches():
    ds, _ = synthetic_activity_dataset(120, 3, d_features=4, rng=np.random.default_rng(0))
    split = build_semi_unsupervised_split(ds, (0, 1), (2,), 0, 1, np.random.default_rng(0))
    batches = list(training.minibatch_interleave(split, make_toy_config(), np.random.default_rng(0)))
    assert all(labelled is None for labelled, _ in batches)
    assert sum(x.shape[0] for _, x in batches) == len(split.unlabelled)


def test_alpha_defaults_to_a_tenth_of_the_inverse_labelled_fraction():
    cfg = TrainConfig()
    assert cfg.resolve_alpha(500, 54_500) == pytest.approx(11.0)
    assert cfg.resolve_alpha(0, 100) == 0.0
    assert TrainConfig(alpha=2.0).resolve_alpha(500, 54_500) == 2.0


def _fixed_noise_loss(params, split, alpha):
    rng = np.random.default_rng(99)
    x_u, x_l = split.unlabelled.features, split.labelled.features
    eps_u = rng.standard_normal((x_u.shape[0], params.arch.z_dim))
    eps_l = rng.standard_normal((x_l.shape[0], params.arch.z_dim))
    with ad.no_grad():
        return models.total_loss(params, (x_l, split.labelled_slots()), x_u, alpha, 0.0,
                                 eps_labelled=eps_l, eps_unlabelled=eps_u).item()


def test_zero_epochs_returns_the_initial_parameters(toy_split):
    cfg = make_toy_config(epochs=0)
    a = training.train(toy_split, cfg)
    b = training.train(toy_split, cfg)
    assert a.epochs_completed == 0 and len(a.history) == 0
    for pa, pb in zip(a.params.parameters(), b.params.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_training_reduces_the_loss(toy_split):
    before = training.train(toy_split, make_toy_config(epochs=0))
    after = training.train(toy_split, make_toy_config(epochs=3))
    assert _fixed_noise_loss(after.params, toy_split, after.alpha) < _fixed_noise_loss(before.params, toy_split, before.alpha)


def test_history_parts_rebuild_the_loss(toy_split, tmp_path):
    result = training.train(toy_split, make_toy_config(epochs=2), out_dir=str(tmp_path))
    history = result.history
    assert list(history.columns) == training.HISTORY_COLUMNS
    assert history["epoch"].tolist() == [1, 2]
    rebuilt = (-(history.recon - history.kl_z + history.log_prior_y + history.entropy_y)
               + result.alpha * history.cross_entropy + history.penalty)
    assert np.allclose(history.loss, rebuilt)
    assert history.val_accuracy.between(0, 1).all()
    assert os.path.exists(tmp_path / "history.csv")
    assert os.path.exists(tmp_path / "checkpoints" / "best.manifest")
    assert os.path.exists(tmp_path / "checkpoints" / "epoch_0002.manifest")


def test_resumed_run_matches_an_uninterrupted_run(tmp_path):
    split = make_toy_split()
    straight = training.train(split, make_toy_config(epochs=4), out_dir=str(tmp_path / "straight"))

    interrupted = str(tmp_path / "interrupted")
    training.train(split, make_toy_config(epochs=2), out_dir=interrupted)
    resumed = training.train(split, make_toy_config(epochs=4), out_dir=interrupted, resume=True)

    assert resumed.epochs_completed == 4
    for a, b in zip(straight.params.parameters(), resumed.params.parameters()):
        assert np.array_equal(a.data, b.data), a.name
    assert np.allclose(straight.history.loss, resumed.history.loss)


def test_divergence_reports_the_last_good_checkpoint(toy_split, tmp_path, monkeypatch):
    real_loss_terms = training.loss_terms
    n_steps = training.steps_per_epoch(toy_split, make_toy_config())
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        terms = real_loss_terms(*args, **kwargs)
        if calls["n"] > n_steps:
            terms.total = ad.Tensor(float("nan"))
        return terms

    monkeypatch.setattr(training, "loss_terms", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        training.train(toy_split, make_toy_config(epochs=3), out_dir=str(tmp_path))
    assert info.value.last_good_checkpoint.endswith("epoch_0001.manifest")
    assert os.path.exists(info.value.last_good_checkpoint)


def test_resuming_an_early_stopped_run_changes_nothing(toy_split, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "validation_elbo", lambda *args, **kwargs: -1.0)
    cfg = make_toy_config(epochs=6, patience=1)
    first = training.train(toy_split, cfg, out_dir=str(tmp_path))
    assert first.stopped_early and first.epochs_completed == 2

    files = ["history.csv", "state.json", "state.npz"]
    before = {name: (tmp_path / name).read_bytes() for name in files}
    resumed = training.train(toy_split, cfg, out_dir=str(tmp_path), resume=True)

    assert resumed.stopped_early
    assert resumed.epochs_completed == 2
    assert resumed.best_epoch == 1
    assert {name: (tmp_path / name).read_bytes() for name in files} == before
    for a, b in zip(first.params.parameters(), resumed.params.parameters()):
        assert np.array_equal(a.data, b.data)


def test_same_config_and_seed_write_identical_history_files(tmp_path):
    for name in ("a", "b"):
        training.train(make_toy_split(), make_toy_config(epochs=3), out_dir=str(tmp_path / name))
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
