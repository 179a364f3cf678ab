import numpy as np
import pytest

from gm_dgm.data import build_prior, build_semi_unsupervised_split, carve_validation, synthetic_activity_dataset
from gm_dgm.models import Likelihood, ModelArchitecture, ModelKind, init_model
from gm_dgm.training import TrainConfig
from gm_dgm.utils import set_quiet


@pytest.fixture(autouse=True)
def quiet():
    set_quiet(True)
    yield
    set_quiet(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_toy_params(kind, likelihood=Likelihood.BERNOULLI, seed=0, x_dim=5, k=3, z_dim=2, width=6):
    arch = ModelArchitecture(kind, likelihood, x_dim, k, z_dim=z_dim, hidden_width=width, n_layers=2)
    prior = build_prior(2, k - 2, 0.3, 0.4 / (k - 2))
    return init_model(arch, prior, np.random.default_rng(seed), np.float64)


@pytest.fixture(params=[ModelKind.M2, ModelKind.GMDGM], ids=["m2", "gmdgm"])
def toy_params(request):
    return make_toy_params(request.param)


def make_toy_split(seed=0, n_windows=300, with_validation=True):
    rng = np.random.default_rng(seed)
    ds, _ = synthetic_activity_dataset(n_windows, 3, d_features=6, rng=rng, separation=3.0)
    validation = None
    if with_validation:
        ds, validation = carve_validation(ds, 40, rng)
    return build_semi_unsupervised_split(ds, (0, 1), (2,), 5, 1, rng, validation=validation)


@pytest.fixture
def toy_split():
    return make_toy_split()


def make_toy_config(**overrides):
    settings = dict(
        model=ModelKind.GMDGM,
        likelihood=Likelihood.GAUSSIAN,
        epochs=1,
        batch_size_labelled=10,
        batch_size_unlabelled=20,
        lr=1e-2,
        hidden_width=8,
        n_layers=2,
        z_dim=2,
        checkpoint_every=1,
        eval_batch_size=64,
        progress=False,
        seed=7,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def toy_config():
    return make_toy_config()
