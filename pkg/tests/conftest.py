import numpy as np
import pytest

from spaninfluence.data import GeneratorSpec, generate_synthetic
from spaninfluence.runs import resolve_dataset
from spaninfluence.training import TrainConfig, build_model, train

SMALL_SPEC = GeneratorSpec(n_train=40, n_dev=20, n_test=8, noise_vocab=12, pattern_vocab=12, seed=0)


@pytest.fixture(scope="session")
def small_data():
    ds, _ = generate_synthetic(SMALL_SPEC)
    return ds


@pytest.fixture(scope="session")
def small_run(small_data):
    """A few epochs on a tiny model; small enough for exact Hessians over every parameter."""
    model = build_model(small_data, embed_dim=4, hidden_dim=4, seed=0)
    res = train(TrainConfig(learning_rate=1e-2, max_epochs=8, seed=0), small_data, model)
    return model, res


@pytest.fixture(scope="session")
def synthetic_data():
    return resolve_dataset("bundled:synthetic")


@pytest.fixture(scope="session")
def synthetic_run(synthetic_data):
    model = build_model(synthetic_data, seed=0)
    return model, train(TrainConfig(seed=0), synthetic_data, model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_out_dir(tmp_path_factory, monkeypatch):
    """Keep CLI default outputs (rankings, caches) out of the working tree."""
    monkeypatch.setenv("SPANINF_OUT_DIR", str(tmp_path_factory.getbasetemp() / "cli-out"))
