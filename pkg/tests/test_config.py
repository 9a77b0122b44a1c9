import json
import logging

import pytest

from msfin.core.config import Settings, format_config_text, load_config_file, parse_config_text
from msfin.core.exceptions import ConfigurationError
from msfin.core.logging import JsonFormatter
from msfin.models.common import Ablation, Recipe, Subcommand, Variant
from msfin.models.manifest import RunManifest
from msfin.models.network import NetworkConfig
from msfin.models.training import TrainConfig


def test_parse_config_text():
    text = "# run\nchannels = 30\n\nlr_init=2e-4   # faster\nval_dir = data/val\n"
    assert parse_config_text(text) == {"channels": "30", "lr_init": "2e-4", "val_dir": "data/val"}


def test_hash_inside_a_value_is_kept():
    text = "val_dir = runs/#3/val  # note\ntrain_dir=data#x\n  # indented comment\n"
    assert parse_config_text(text) == {"val_dir": "runs/#3/val", "train_dir": "data#x"}


@pytest.mark.parametrize("text", ["channels 30", " = 3", "seed = 1\nseed = 2"])
def test_parse_config_text_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config_file(tmp_path / "absent.cfg")


def test_format_config_text_renders_booleans():
    assert format_config_text({"ns": True, "cic": False, "seed": 3}) == "ns = true\ncic = false\nseed = 3\n"


def test_precedence_preset_overlay_file_flags():
    manifest = RunManifest.resolve(
        Subcommand.TRAIN,
        file_values={"variant": "msfin-s", "ablation": "no-ic", "channels": "36", "seed": "4"},
        overrides={"channels": "24", "batch": "2"},
    )
    assert manifest.network.variant is Variant.MSFIN_S
    assert manifest.network.rrcab_loops == 0
    assert manifest.ablation is Ablation.NO_IC
    assert (manifest.network.ic, manifest.network.ns) == (False, False)
    assert manifest.network.channels == 24
    assert (manifest.train.seed, manifest.train.batch) == (4, 2)


def test_unknown_key_and_invalid_values():
    with pytest.raises(ConfigurationError, match="colour"):
        RunManifest.resolve(Subcommand.TRAIN, overrides={"colour": "red"})
    with pytest.raises(ConfigurationError, match="channels"):
        RunManifest.resolve(Subcommand.TRAIN, overrides={"channels": "many"})
    with pytest.raises(ConfigurationError):
        RunManifest.resolve(Subcommand.TRAIN, overrides={"variant": "msfin-xl"})
    with pytest.raises(ConfigurationError):
        RunManifest.resolve(Subcommand.TRAIN, overrides={"channels": "40", "groups": "6"})


def test_echo_reproduces_configuration():
    manifest = RunManifest.resolve(
        Subcommand.TRAIN, overrides={"variant": "msfin-s", "cic": "true", "lr_patch": "24", "val_dir": "v"}
    )
    again = RunManifest.resolve(Subcommand.EVAL, file_values=parse_config_text(manifest.config_text()))
    assert again.network == manifest.network
    assert again.train == manifest.train
    assert manifest.config_echo()["cic"] == "true"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-5, lr_final=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(unknown=1)


def test_network_config_presets():
    assert NetworkConfig.preset(Variant.MSFIN_S).channels == 30
    assert NetworkConfig.preset("msfin", Ablation.CIC).cic
    assert NetworkConfig.preset(Variant.MSFIN, channels=12).channels == 12
    with pytest.raises(ValueError):
        NetworkConfig(ic=False, cic=True)


def test_settings_worker_count(monkeypatch):
    monkeypatch.setenv("DATA_WORKERS", "8")
    monkeypatch.setenv("MSFIN_THREADS", "3")
    assert Settings().worker_count == 3
    monkeypatch.delenv("MSFIN_THREADS")
    assert Settings().worker_count == 8


def test_json_formatter_merges_structured_fields():
    record = logging.LogRecord("msfin.test", logging.INFO, __file__, 1, "Training step", None, None)
    record.extra = {"step": 3, "loss": 0.25}
    data = json.loads(JsonFormatter().format(record))
    assert data["message"] == "Training step"
    assert data["level"] == "INFO"
    assert (data["step"], data["loss"]) == (3, 0.25)


def test_overfit_recipe_sits_under_file_and_flags():
    manifest = RunManifest.resolve(Subcommand.TRAIN, overrides={"recipe": "overfit"})
    assert manifest.recipe == Recipe.OVERFIT
    assert manifest.network.channels == 12
    assert manifest.network.tail_scale == 0.5
    assert (manifest.train.total_steps, manifest.train.lr_init, manifest.train.lr_patch) == (200, 2e-3, 12)

    layered = RunManifest.resolve(
        Subcommand.TRAIN, file_values={"recipe": "overfit", "channels": "18"}, overrides={"total_steps": "50"}
    )
    assert layered.network.channels == 18
    assert layered.train.total_steps == 50
    assert layered.train.batch == 4
    with pytest.raises(ConfigurationError):
        RunManifest.resolve(Subcommand.TRAIN, overrides={"recipe": "underfit"})
