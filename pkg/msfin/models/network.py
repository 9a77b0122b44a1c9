from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from msfin.models.common import Ablation, Variant

# Widths chosen so the parameter totals land on 682K / 352K with non-shared adapters.
VARIANT_PRESETS: Dict[Variant, Dict[str, Any]] = {
    Variant.MSFIN: {"variant": Variant.MSFIN, "channels": 42, "rrcab_loops": 1, "ns": True},
    Variant.MSFIN_S: {"variant": Variant.MSFIN_S, "channels": 30, "rrcab_loops": 0, "ns": True},
}

ABLATION_OVERLAYS: Dict[Ablation, Dict[str, bool]] = {
    Ablation.NO_IC: {"ic": False, "cic": False, "ns": False},
    Ablation.IC: {"ic": True, "cic": False, "ns": False},
    Ablation.CIC: {"ic": True, "cic": True, "ns": False},
    Ablation.IC_NS: {"ic": True, "cic": False, "ns": True},
    Ablation.BASE: {"ca": False, "cs": False, "ff": False},
    Ablation.CA: {"ca": True, "cs": False, "ff": False},
    Ablation.CA_CS: {"ca": True, "cs": True, "ff": False},
    Ablation.CA_FF: {"ca": True, "cs": False, "ff": True},
}


class NetworkConfig(BaseModel):
    """Architecture hyperparameters and ablation toggles."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Variant = Variant.MSFIN
    channels: int = Field(42, ge=1)
    groups: int = Field(6, ge=1)
    ca_reduction: int = Field(16, ge=1)
    rrcab_loops: int = Field(1, ge=0)
    scale: int = Field(4, ge=1)
    ic: bool = True
    cic: bool = False
    ns: bool = True
    ca: bool = True
    cs: bool = False
    ff: bool = True
    global_skip: bool = True
    leaky_slope: float = Field(0.2, ge=0.0)
    zero_tail: bool = False
    tail_scale: float = Field(1.0, ge=0.0)  # multiplies the reconstruction conv's initial weights

    @model_validator(mode="after")
    def check_structure(self) -> "NetworkConfig":
        if self.channels % self.groups:
            raise ValueError(f"channels={self.channels} must be divisible by groups={self.groups}")
        if self.cic and not self.ic:
            raise ValueError("cic requires ic")
        return self

    @property
    def ca_bottleneck(self) -> int:
        return max(self.channels // self.ca_reduction, 4)

    @classmethod
    def preset(cls, variant: Variant, ablation: Optional[Ablation] = None, **overrides: Any) -> "NetworkConfig":
        """Variant defaults, then an optional ablation overlay, then explicit overrides."""
        values: Dict[str, Any] = dict(VARIANT_PRESETS[Variant(variant)])
        if ablation is not None:
            values.update(ABLATION_OVERLAYS[Ablation(ablation)])
        values.update(overrides)
        return cls(**values)

    def with_overlay(self, ablation: Ablation) -> "NetworkConfig":
        return type(self)(**{**self.model_dump(), **ABLATION_OVERLAYS[Ablation(ablation)]})
