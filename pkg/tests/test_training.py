import math

import numpy as np
import pandas as pd
import pytest

from msfin.core.exceptions import CheckpointError, DatasetError, ImageError, TrainingDivergedError
from msfin.nn.network import MSFIN
from msfin.selftest import block_card, overfit_suite
from msfin.services import training_service as training_module
from msfin.services.checkpoint_service import checkpoint_service
from msfin.services.training_service import (
    CONFIG_FILE,
    CURVES_FILE,
    LAST_CHECKPOINT,
    LOG_FILE,
    METRICS_FILE,
    checkpoint_name,
    training_service,
)
from msfin.tensor import Tensor
from msfin.utils.image import load_png, sample_patch_pair
from msfin.utils.optim import cosine_lr

# 8x8 LR patches at x4 need 32x32 HR crops.
SHORT = {"lr_patch": "8", "batch": "2", "total_steps": "6", "checkpoint_every": "3",
         "val_every": "0", "log_every": "1"}


def _run(manifest, data, out, resume=None, seed=0):
    net = MSFIN(manifest.network, seed=seed)
    return training_service.train_loop(net, data, manifest, out, resume=resume)


def test_checkpoint_names():
    assert checkpoint_name(42) == "step_000042.msfn"


def test_runs_are_deterministic(tmp_path, image_dir, tiny_manifest):
    data = image_dir(sizes=((32, 32), (40, 36)))
    manifest = tiny_manifest(**SHORT)
    _run(manifest, data, tmp_path / "a")
    _run(manifest, data, tmp_path / "b")
    for name in (checkpoint_name(3), checkpoint_name(6)):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path, image_dir, tiny_manifest):
    data = image_dir(sizes=((32, 32), (40, 36)))
    manifest = tiny_manifest(**SHORT)
    _run(manifest, data, tmp_path / "a")
    summary = _run(manifest, data, tmp_path / "c", resume=tmp_path / "a" / checkpoint_name(3), seed=123)
    assert (summary.start_step, summary.final_step, summary.steps_run) == (3, 6, 3)
    assert (tmp_path / "c" / checkpoint_name(6)).read_bytes() == (tmp_path / "a" / checkpoint_name(6)).read_bytes()


def test_outputs_and_log(tmp_path, image_dir, tiny_manifest):
    data = image_dir()
    manifest = tiny_manifest(**{**SHORT, "log_every": "2"})
    summary = _run(manifest, data, tmp_path / "out")
    out = tmp_path / "out"
    for name in (CONFIG_FILE, METRICS_FILE, CURVES_FILE, LAST_CHECKPOINT, checkpoint_name(3), checkpoint_name(6)):
        assert (out / name).is_file(), name

    log = pd.read_csv(out / LOG_FILE)
    assert list(log.columns) == ["step", "loss", "lr", "val_psnr"]
    assert log["step"].tolist() == [2, 4, 6]
    # the last update uses the rate of step index 5
    assert log["lr"].tolist() == pytest.approx([cosine_lr(t, manifest.train) for t in (1, 3, 5)])
    assert log["val_psnr"].isna().all()

    assert summary.checkpoints == [str(out / checkpoint_name(3)), str(out / checkpoint_name(6))]
    assert checkpoint_service.load(out / LAST_CHECKPOINT).step == 6
    assert "msfin_train_step 6.0" in (out / METRICS_FILE).read_text()
    assert "lr_patch = 8" in (out / CONFIG_FILE).read_text()


def test_identity_network_starts_at_bicubic_loss(tmp_path, image_dir, tiny_manifest):
    data = image_dir()
    manifest = tiny_manifest(**{**SHORT, "batch": "1", "total_steps": "1", "augment": "false",
                                "zero_tail": "true"})
    summary = _run(manifest, data, tmp_path / "out")

    pair = sample_patch_pair(load_png(data / "img00.png"), 4, 8, np.random.default_rng(0), augment=False)
    expected = np.mean(np.abs(pair.lr_up.astype(np.float32) - pair.hr.astype(np.float32)))
    assert summary.initial_loss == pytest.approx(float(expected), rel=1e-5)


def test_tiny_overfit_lowers_loss(tmp_path, image_dir, tiny_manifest):
    data = image_dir()
    manifest = tiny_manifest(**{**SHORT, "batch": "1", "total_steps": "40", "checkpoint_every": "40",
                                "augment": "false", "lr_init": "5e-4", "lr_final": "5e-5"})
    summary = _run(manifest, data, tmp_path / "out")
    log = pd.read_csv(tmp_path / "out" / LOG_FILE)
    assert summary.steps_run == 40
    assert log["loss"].iloc[-5:].mean() < log["loss"].iloc[:5].mean()


def test_validation_psnr_is_logged(tmp_path, image_dir, tiny_manifest):
    data = image_dir()
    val = image_dir("val", sizes=((24, 24),))
    summary = _run(tiny_manifest(**{**SHORT, "val_every": "3", "val_dir": str(val)}), data, tmp_path / "out")
    log = pd.read_csv(tmp_path / "out" / LOG_FILE)
    scored = log.dropna(subset=["val_psnr"])
    assert scored["step"].tolist() == [3, 6]
    assert math.isfinite(summary.val_psnr)
    assert summary.val_psnr == pytest.approx(scored["val_psnr"].iloc[-1])


def test_non_finite_loss_stops_training(tmp_path, image_dir, tiny_manifest, monkeypatch):
    monkeypatch.setattr(training_module, "l1_loss", lambda pred, target: Tensor(np.full((1, 1, 1, 1), np.nan)))
    with pytest.raises(TrainingDivergedError) as info:
        _run(tiny_manifest(**SHORT), image_dir(), tmp_path / "out")
    assert info.value.step == 1
    assert not (tmp_path / "out" / checkpoint_name(3)).exists()


def test_empty_dataset(tmp_path, tiny_manifest):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        _run(tiny_manifest(**SHORT), tmp_path / "empty", tmp_path / "out")


def test_images_smaller_than_patch(tmp_path, image_dir, tiny_manifest):
    with pytest.raises(ImageError) as info:
        _run(tiny_manifest(**SHORT), image_dir(sizes=((16, 16),)), tmp_path / "out")
    assert "needs at least 32x32" in str(info.value)


def test_resume_rejects_checkpoints_without_state(tmp_path, image_dir, tiny_manifest):
    data = image_dir()
    manifest = tiny_manifest(**SHORT)
    _run(manifest, data, tmp_path / "a")
    checkpoint = checkpoint_service.load(tmp_path / "a" / checkpoint_name(3))

    stateless = checkpoint.model_copy(update={"rng_state": None})
    checkpoint_service.save(stateless, tmp_path / "stateless.msfn")
    with pytest.raises(CheckpointError) as info:
        _run(manifest, data, tmp_path / "b", resume=tmp_path / "stateless.msfn")
    assert info.value.field == "rng_state"

    with pytest.raises(CheckpointError) as info:
        _run(tiny_manifest(**{**SHORT, "total_steps": "2"}), data, tmp_path / "c",
             resume=tmp_path / "a" / checkpoint_name(3))
    assert info.value.field == "step"


def test_overfit_recipe_meets_acceptance_checks():
    outcomes = {o.name: o for o in overfit_suite(seed=0)}
    assert set(outcomes) == {"loss_halved", "beats_bicubic", "ensemble_not_worse"}
    assert outcomes["loss_halved"].value < 0.5, outcomes["loss_halved"].detail
    assert outcomes["beats_bicubic"].value >= 0.3, outcomes["beats_bicubic"].detail
    assert outcomes["ensemble_not_worse"].value >= -0.05, outcomes["ensemble_not_worse"].detail


def test_block_card_is_piecewise_constant(rng):
    card = block_card(rng, size=32, block=8)
    assert card.data.shape == (3, 32, 32)
    np.testing.assert_array_equal(card.data[:, :8, :8], np.broadcast_to(card.data[:, :1, :1], (3, 8, 8)))
    assert not np.array_equal(card.data[:, 0, 0], card.data[:, 0, 8])
