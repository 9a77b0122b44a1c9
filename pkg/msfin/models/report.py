import math
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, Field, model_validator


class LayerCount(BaseModel):
    name: str
    kind: str  # conv2d / conv_transpose2d
    shape: List[int]
    count: int = Field(ge=0)


class ParameterReport(BaseModel):
    """Per-layer parameter counts and their total."""

    layers: List[LayerCount] = []
    total: int = 0
    config: Dict[str, str] = {}

    @model_validator(mode="after")
    def check_total(self) -> "ParameterReport":
        expected = sum(layer.count for layer in self.layers)
        if self.total != expected:
            raise ValueError(f"total {self.total} != sum of layers {expected}")
        return self

    @property
    def total_k(self) -> float:
        return self.total / 1000.0

    def within(self, target_k: float, tolerance: float = 0.02) -> bool:
        return abs(self.total_k - target_k) / target_k <= tolerance

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"layer": l.name, "kind": l.kind, "shape": "x".join(map(str, l.shape)), "params": l.count}
             for l in self.layers],
            columns=["layer", "kind", "shape", "params"],
        )

    def format_table(self) -> str:
        body = self.to_frame().to_string(index=False)
        return f"{body}\ntotal: {self.total} ({self.total_k:.1f}K)"


class ImageMetrics(BaseModel):
    name: str
    psnr: float
    ssim: float


class MetricReport(BaseModel):
    """Per-image PSNR/SSIM on the Y channel plus dataset means."""

    images: List[ImageMetrics] = []
    scale: int = 4
    shave: int = 4
    ensemble: bool = False
    config: Dict[str, str] = {}

    @property
    def mean_psnr(self) -> float:
        if not self.images:
            return float("nan")
        return float(sum(m.psnr for m in self.images) / len(self.images))

    @property
    def mean_ssim(self) -> float:
        if not self.images:
            return float("nan")
        return float(sum(m.ssim for m in self.images) / len(self.images))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([m.model_dump() for m in self.images], columns=["name", "psnr", "ssim"])
        mean = pd.DataFrame([{"name": "mean", "psnr": self.mean_psnr, "ssim": self.mean_ssim}])
        return pd.concat([df, mean], ignore_index=True)

    def format_table(self) -> str:
        header = f"scale=x{self.scale} shave={self.shave} ensemble={'on' if self.ensemble else 'off'}"
        body = self.to_frame().to_string(
            index=False,
            formatters={"psnr": _format_db, "ssim": "{:.4f}".format},
        )
        return f"{header}\n{body}"

    def to_csv(self, path: str) -> None:
        """Per-image rows plus the mean row, preceded by `# key = value` config lines."""
        echo = {"scale": self.scale, "shave": self.shave, "ensemble": str(self.ensemble).lower(), **self.config}
        with open(path, "w", encoding="utf-8", newline="") as f:
            for key, value in echo.items():
                f.write(f"# {key} = {value}\n")
            self.to_frame().to_csv(f, index=False, float_format="%.6f")


def _format_db(value: Optional[float]) -> str:
    if value is None or math.isinf(value):
        return "inf"
    return f"{value:.2f}"
