import numpy as np
import pytest

from spaninfluence.data import GeneratorSpec, generate_synthetic
from spaninfluence.training import (
    Checkpoint, DivergenceError, TrainConfig, build_model, config_hash, make_delta_variants, train,
)
from spaninfluence import autodiff


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_separable_set_fits_perfectly():
    ds, _ = generate_synthetic(GeneratorSpec(n_train=50, n_dev=10, n_test=10, noise_rate=0.0,
                                             pattern_length=(1, 1), seed=5))
    model = build_model(ds, embed_dim=8, hidden_dim=8, seed=0)
    res = train(TrainConfig(learning_rate=1e-2, max_epochs=40, seed=0), ds, model)
    assert model.accuracy(res.final.params, ds.train) == 1.0


def test_training_is_bit_identical(small_data):
    cfg = TrainConfig(learning_rate=1e-2, max_epochs=3, seed=7)
    a = train(cfg, small_data, build_model(small_data, 4, 4, seed=7))
    b = train(cfg, small_data, build_model(small_data, 4, 4, seed=7))
    assert a.final.to_bytes() == b.final.to_bytes()
    assert [c.to_bytes() for c in a.epochs] == [c.to_bytes() for c in b.epochs]


def test_checkpoint_list_and_selection(small_run):
    _, res = small_run
    assert len(res.epochs) == 3
    steps = [c.step for c in res.epochs]
    assert steps == sorted(steps)
    assert all(c.kind == "epoch" for c in res.epochs)
    assert res.final.kind == "final"
    assert all(res.dev_accuracy >= h["dev_acc"] for h in res.history)


def test_checkpoint_file_round_trip(tmp_path, small_run):
    _, res = small_run
    res.final.save(tmp_path / "f.ckpt")
    back = Checkpoint.load(tmp_path / "f.ckpt")
    np.testing.assert_array_equal(back.params, res.final.params)
    assert (back.step, back.kind, back.epoch, back.config_hash) == (res.final.step, "final", res.final.epoch, res.final.config_hash)
    assert back.params_hash == res.final.params_hash


def test_checkpoint_rejects_non_finite():
    with pytest.raises(ValueError):
        Checkpoint(np.array([np.nan]), 0, "final", 0, "x")


def test_divergence_returns_last_finite(small_data):
    model = build_model(small_data, 4, 4, seed=0)
    with pytest.raises(DivergenceError) as info:
        train(TrainConfig(learning_rate=1e300, optimizer="sgd", max_epochs=2, seed=0), small_data, model)
    ck = info.value.checkpoint
    assert ck is not None and np.all(np.isfinite(ck.params))


def test_variants_eta_zero_identical(small_run, small_data):
    model, res = small_run
    vs = make_delta_variants(model, res.final, small_data.train, count=3, eta=0.0)
    for v in vs:
        np.testing.assert_array_equal(v.params, res.final.params)


def test_variants_delta_equals_eta_grad(small_run, small_data):
    model, res = small_run
    eta = 1e-3
    vs = make_delta_variants(model, res.final, small_data.train, count=3, eta=eta, batch_size=8, seed=2)
    assert len(vs) == 3
    assert len({tuple(v.provenance["batch_ids"]) for v in vs}) == 3
    by_id = {z.id: z for z in small_data.train}
    for v in vs:
        batch = [by_id[i] for i in v.provenance["batch_ids"]]
        g = autodiff.mean_grad(model.ce_loss_fn, res.final.params, model.examples(batch, 64))
        np.testing.assert_allclose(v.params, res.final.params - eta * g, rtol=1e-12, atol=1e-15)
        assert v.provenance["delta_norm"] == pytest.approx(eta * v.provenance["grad_norm"], rel=1e-9)
        assert v.kind == "delta_variant"


def test_variant_errors(small_run, small_data):
    model, res = small_run
    with pytest.raises(ValueError):
        make_delta_variants(model, res.final, small_data.train, eta=-1.0)
    with pytest.raises(ValueError):
        make_delta_variants(model, res.epochs[0], small_data.train)


def test_default_variants_are_small(synthetic_run, synthetic_data):
    model, res = synthetic_run
    vs = make_delta_variants(model, res.final, synthetic_data.train)
    bound = 0.01 * np.linalg.norm(res.final.params)
    assert all(v.provenance["delta_norm"] < bound for v in vs)


def test_config_hash_is_stable():
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))
