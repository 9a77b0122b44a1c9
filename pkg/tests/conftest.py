from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest

from msfin.models.common import Subcommand
from msfin.models.manifest import RunManifest
from msfin.models.network import NetworkConfig
from msfin.nn.network import MSFIN
from msfin.tensor import DType
from msfin.utils.image import PlanarImage, save_png

TINY = {"channels": "6", "groups": "3"}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def tiny_cfg() -> NetworkConfig:
    return NetworkConfig(channels=6, groups=3)


@pytest.fixture
def tiny_net(tiny_cfg) -> MSFIN:
    return MSFIN(tiny_cfg, seed=7)


@pytest.fixture
def tiny_net64(tiny_cfg) -> MSFIN:
    return MSFIN(tiny_cfg, seed=7, dtype=DType.FLOAT64)


@pytest.fixture
def tiny_manifest() -> Callable[..., RunManifest]:
    def build(**overrides: str) -> RunManifest:
        return RunManifest.resolve(Subcommand.TRAIN, overrides={**TINY, **overrides})
    return build


def smooth_image(rng: np.random.Generator, height: int, width: int) -> PlanarImage:
    """Low-frequency RGB test card with a little texture."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    planes = [
        0.5 + 0.4 * np.sin(2 * np.pi * (xx + 0.3 * c) * (1 + c)) * np.cos(2 * np.pi * yy)
        for c in range(3)
    ]
    data = np.stack(planes) + 0.03 * rng.standard_normal((3, height, width))
    return PlanarImage.from_array(data)


@pytest.fixture
def image_dir(tmp_path, rng) -> Callable[..., Path]:
    """Write PNG test cards into a fresh directory and return it."""
    def build(name: str = "hr", sizes: List[tuple] = ((32, 32),)) -> Path:
        directory = tmp_path / name
        directory.mkdir()
        for i, (h, w) in enumerate(sizes):
            save_png(smooth_image(rng, h, w), directory / f"img{i:02d}.png")
        return directory
    return build
