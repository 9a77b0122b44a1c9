from typing import Any, Dict, Optional

from pydantic import BaseModel, ValidationError

from msfin.core.config import format_config_text
from msfin.core.exceptions import ConfigurationError
from msfin.models.common import Ablation, Recipe, Subcommand, Variant
from msfin.models.network import ABLATION_OVERLAYS, VARIANT_PRESETS, NetworkConfig
from msfin.models.training import TrainConfig

NETWORK_KEYS = tuple(NetworkConfig.model_fields)
TRAIN_KEYS = tuple(TrainConfig.model_fields)
# Select overlays during resolution; not fields of either config.
PRESET_KEYS = ("ablation", "recipe")

# Whole-run presets spanning both configs, applied after the ablation overlay.
RECIPES: Dict[Recipe, Dict[str, Any]] = {
    # One-image overfit: a noise-free image must end above the bicubic baseline in 200 steps.
    Recipe.OVERFIT: {
        "channels": 12, "tail_scale": 0.5,
        "lr_patch": 12, "batch": 4, "total_steps": 200, "lr_init": 2e-3, "lr_final": 2e-5,
        "augment": True, "checkpoint_every": 200, "val_every": 0, "log_every": 10,
    },
}


def build_model(model_cls, values: Dict[str, Any], source: str):
    """Instantiate a pydantic model, reporting validation failures as ConfigurationError."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model_cls.__name__}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigurationError(f"{source}: {problems}") from e


class RunManifest(BaseModel):
    """A parsed command together with its fully resolved configuration."""

    command: Subcommand
    config_path: Optional[str] = None
    overrides: Dict[str, str] = {}
    ablation: Optional[Ablation] = None
    recipe: Optional[Recipe] = None
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()

    @classmethod
    def resolve(
        cls,
        command: Subcommand,
        file_values: Optional[Dict[str, str]] = None,
        overrides: Optional[Dict[str, str]] = None,
        config_path: Optional[str] = None,
    ) -> "RunManifest":
        """Model defaults <- variant preset <- ablation overlay <- recipe <- config file <- flags."""
        merged: Dict[str, str] = dict(file_values or {})
        merged.update(overrides or {})

        unknown = sorted(k for k in merged if k not in NETWORK_KEYS + TRAIN_KEYS + PRESET_KEYS)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")

        try:
            variant = Variant(merged.get("variant", Variant.MSFIN.value))
            ablation = Ablation(merged["ablation"]) if merged.get("ablation") else None
            recipe = Recipe(merged["recipe"]) if merged.get("recipe") else None
        except ValueError as e:
            raise ConfigurationError(str(e)) from e

        network_values: Dict[str, Any] = dict(VARIANT_PRESETS[variant])
        if ablation is not None:
            network_values.update(ABLATION_OVERLAYS[ablation])
        preset: Dict[str, Any] = dict(RECIPES[recipe]) if recipe is not None else {}
        network_values.update({k: v for k, v in preset.items() if k in NETWORK_KEYS})
        network_values.update({k: v for k, v in merged.items() if k in NETWORK_KEYS})
        train_values = {k: v for k, v in preset.items() if k in TRAIN_KEYS}
        train_values.update({k: v for k, v in merged.items() if k in TRAIN_KEYS})

        return cls(
            command=command,
            config_path=config_path,
            overrides=dict(overrides or {}),
            ablation=ablation,
            recipe=recipe,
            network=build_model(NetworkConfig, network_values, "network config"),
            train=build_model(TrainConfig, train_values, "train config"),
        )

    def config_values(self) -> Dict[str, Any]:
        """Flat echo of the resolved configuration; feeding it back reproduces it."""
        values: Dict[str, Any] = {}
        for key, value in {**self.network.model_dump(), **self.train.model_dump()}.items():
            if value is None:
                continue
            values[key] = value.value if hasattr(value, "value") else value
        return values

    def config_text(self) -> str:
        return format_config_text(self.config_values())

    def config_echo(self) -> Dict[str, str]:
        """config_values() rendered as the strings a config file would hold."""
        return {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in self.config_values().items()}
