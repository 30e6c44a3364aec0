import json

import numpy as np
import pytest

from hrpvt import load_weights
from hrpvt import train as train_mod
from hrpvt.config import AugmentConfig, ConfigError, RunConfig
from hrpvt.data import gen_synthetic
from hrpvt.optim import step_lr
from hrpvt.tensor import Tensor


def overfit_run(tmp_path, epochs=10, count=4, augment=False, seed=0):
    run = RunConfig(epochs=epochs, batch_size=count, output_dir=str(tmp_path), seed=seed)
    run.model.dtype = "float64"
    run.data.count = count
    run.augment = AugmentConfig(enabled=augment)
    return run


def test_loss_strictly_decreases_first_steps(tmp_path):
    # one batch per epoch, so each history entry is one step on the same batch
    result = train_mod.train(overfit_run(tmp_path, epochs=10), write=False)
    losses = [h["loss"] for h in result.history]
    assert len(losses) == 10 and result.history[-1]["step"] == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_equal_seeds_give_identical_checkpoints(tmp_path):
    a = train_mod.train(overfit_run(tmp_path / "a", epochs=2, augment=True))
    b = train_mod.train(overfit_run(tmp_path / "b", epochs=2, augment=True))
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = train_mod.train(overfit_run(tmp_path / "c", epochs=2, augment=True, seed=1), write=True)
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_manifest_contents(tmp_path):
    train_mod.train(overfit_run(tmp_path, epochs=1))
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["seed"] == 0 and m["steps"] == 1
    assert set(m["final_metrics"]) == {"mean_error_px", "pck@0.1", "pck@0.05"}
    assert RunConfig.from_dict(m["config"]).to_dict() == overfit_run(tmp_path, epochs=1).to_dict()


def test_checkpoint_loadable_after_interruption(tmp_path):
    seen = []

    def stop(record):
        seen.append(record["epoch"])
        if record["epoch"] == 1:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train_mod.train(overfit_run(tmp_path, epochs=5), on_epoch=stop)
    model = load_weights(tmp_path / "weights.bin")
    assert seen == [0, 1]
    assert not (tmp_path / "weights.bin.tmp").exists()
    assert model.cfg.dtype == "float64"


def test_nan_loss_aborts_with_step(tmp_path, monkeypatch):
    real = train_mod.simcc_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        out = real(*args)
        return out * Tensor(np.nan) if calls["n"] == 3 else out

    monkeypatch.setattr(train_mod, "simcc_loss", flaky)
    with pytest.raises(train_mod.TrainingError, match="at step 2"):
        train_mod.train(overfit_run(tmp_path, epochs=5), write=False)


def test_invalid_run_rejected(tmp_path):
    run = overfit_run(tmp_path)
    run.optimizer.milestones = [3, 2]
    with pytest.raises(ConfigError, match="milestones"):
        train_mod.train(run)


def test_empty_dataset_rejected(tmp_path):
    run = overfit_run(tmp_path)
    with pytest.raises(train_mod.TrainingError, match="no training samples"):
        train_mod.train(run, samples=[], write=False)


def test_lr_schedule_values():
    lrs = [step_lr(5e-4, e, [170, 210]) for e in (0, 169, 170, 209, 210, 219)]
    assert np.allclose(lrs, [5e-4, 5e-4, 5e-5, 5e-5, 5e-6, 5e-6], rtol=1e-12)


def test_schedule_applied_per_epoch(tmp_path):
    run = overfit_run(tmp_path, epochs=3)
    run.optimizer.milestones = [1, 2]
    result = train_mod.train(run, write=False)
    assert np.allclose([h["lr"] for h in result.history], [5e-4, 5e-5, 5e-6])


def test_pck_helpers():
    errs = np.array([0.0, 1.0, 2.0, 3.0])
    assert train_mod.pck(errs, np.full(4, 20.0), 0.1) == 0.75
    assert train_mod.pck(np.zeros(0), np.zeros(0), 0.1) == 0.0


def test_evaluate_samples_keys(tmp_path):
    result = train_mod.train(overfit_run(tmp_path, epochs=1), write=False)
    samples = gen_synthetic(result.model.cfg and overfit_run(tmp_path).data.scene, 2)
    metrics = train_mod.evaluate_samples(result.model, samples)
    assert metrics["mean_error_px"] >= 0 and 0 <= metrics["pck@0.1"] <= 1
    assert result.model.training
