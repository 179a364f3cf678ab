import os

import pytest

from gm_dgm import distributions
from gm_dgm.cli import main

TOY_CONFIG = """\
dataset=synthetic
synthetic_windows=300
synthetic_classes=3
synthetic_features=4
synthetic_separation=3.0
semi_sup_classes=0,1
unsup_classes=2
labels_per_class=5
k_extra=1
validation_size=30
model=gmdgm
hidden_width=8
n_layers=2
z_dim=2
epochs=2
batch_size_labelled=10
batch_size_unlabelled=20
checkpoint_every=1
eval_batch_size=64
progress=false
repeats=2
out_dir={out_dir}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "toy.cfg"
    config.write_text(TOY_CONFIG.format(out_dir=root / "runs"))
    assert main(["--quiet", "train", "--config", str(config)]) == 0
    return str(config), str(root / "runs")


def test_train_writes_one_directory_per_repeat(trained):
    _, runs = trained
    assert sorted(os.listdir(runs)) == ["best_run.txt", "resolved_config.cfg", "run_00", "run_01"]
    for run in ("run_00", "run_01"):
        assert os.path.exists(os.path.join(runs, run, "history.csv"))
        assert os.path.exists(os.path.join(runs, run, "checkpoints", "best.manifest"))
    best = open(os.path.join(runs, "best_run.txt")).read()
    assert "best_by_val_elbo=run_0" in best
    assert "run_01_seed=1" in best


def test_eval_writes_the_three_report_files(trained, tmp_path):
    config, runs = trained
    checkpoint = os.path.join(runs, "run_00", "checkpoints", "best")
    assert main(["--quiet", "eval", "--config", config, "--checkpoint", checkpoint, "--out", str(tmp_path)]) == 0
    assert sorted(os.listdir(tmp_path)) == ["confusion.csv", "latents.csv", "metrics.txt"]


def test_eval_rejects_a_checkpoint_of_the_other_model_kind(trained, tmp_path, capsys):
    config, runs = trained
    checkpoint = os.path.join(runs, "run_00", "checkpoints", "best.manifest")
    code = main(["eval", "--config", config, "--checkpoint", checkpoint, "--model", "m2", "--out", str(tmp_path)])
    assert code == 1
    assert "CheckpointError" in capsys.readouterr().err


def test_resume_of_finished_runs_succeeds(trained):
    _, runs = trained
    assert main(["--quiet", "train", "--resume", runs]) == 0
    assert sorted(os.listdir(os.path.join(runs, "run_00", "checkpoints")))[0] == "best.bin"


def test_bad_config_exits_with_2(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("epochs=two\n")
    assert main(["train", "--config", str(config)]) == 2
    assert "epochs" in capsys.readouterr().err


def test_missing_config_file_exits_with_2(tmp_path):
    assert main(["--quiet", "train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_selftest_passes():
    assert main(["--quiet", "selftest"]) == 0


def test_selftest_names_a_broken_check(monkeypatch, capsys):
    real_kl = distributions.gaussian_kl
    monkeypatch.setattr(distributions, "gaussian_kl", lambda q, p: real_kl(q, p) * -1.0)
    assert main(["selftest"]) == 1
    out = capsys.readouterr().out
    assert "❌ kl_closed_form_vs_monte_carlo" in out


def test_unwritable_output_directory_exits_with_1(tmp_path, capsys):
    blocker = tmp_path / "not_a_directory"
    blocker.write_text("")
    config = tmp_path / "toy.cfg"
    config.write_text(TOY_CONFIG.format(out_dir=blocker / "runs"))
    assert main(["train", "--config", str(config)]) == 1
    err = capsys.readouterr().err
    assert "❌" in err and "not_a_directory" in err
