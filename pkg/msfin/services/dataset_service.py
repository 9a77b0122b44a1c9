from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from msfin.core.config import settings
from msfin.core.exceptions import DatasetError
from msfin.core.logging import app_logger as logger
from msfin.utils.image import PatchPair, PlanarImage, load_png, sample_patch_pair

IMAGE_SUFFIXES = (".png",)


def list_images(directory: Union[str, Path]) -> List[Path]:
    """PNG files of a directory in name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Dataset directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"No PNG images in {directory}")
    return files


def lr_directory_for(hr_dir: Union[str, Path], scale: int) -> Path:
    """Sibling `LRx{scale}` directory of an HR directory."""
    return Path(hr_dir).parent / f"LRx{scale}"


class ImageDataset:
    """HR images of a directory, with optional matching LR images (same file names)."""

    def __init__(self, hr_dir: Union[str, Path], lr_dir: Optional[Union[str, Path]] = None, cache_size: int = 64):
        self.hr_dir = Path(hr_dir)
        self.files = list_images(self.hr_dir)
        self.lr_dir = Path(lr_dir) if lr_dir else None
        if self.lr_dir is not None:
            missing = [p.name for p in self.files if not (self.lr_dir / p.name).is_file()]
            if missing:
                raise DatasetError(f"LR images missing in {self.lr_dir}: {', '.join(missing[:5])}")
        self._load = lru_cache(maxsize=cache_size)(load_png)
        logger.info("Dataset opened", extra={"extra": {
            "hr_dir": str(self.hr_dir), "images": len(self.files),
            "lr_dir": str(self.lr_dir) if self.lr_dir else None,
        }})

    def __len__(self) -> int:
        return len(self.files)

    def name(self, index: int) -> str:
        return self.files[index].stem

    def hr(self, index: int) -> PlanarImage:
        return self._load(str(self.files[index]))

    def lr(self, index: int) -> Optional[PlanarImage]:
        if self.lr_dir is None:
            return None
        return self._load(str(self.lr_dir / self.files[index].name))


class PatchSampler:
    """Draws training batches; patches are cut on a thread pool.

    Every patch receives its own child seed, drawn in order from the run generator before any
    work is scheduled, so a batch does not depend on thread timing.
    """

    def __init__(self, dataset: ImageDataset, scale: int, lr_patch: int, augment: bool = True,
                 workers: Optional[int] = None):
        self.dataset = dataset
        self.scale = scale
        self.lr_patch = lr_patch
        self.augment = augment
        self.workers = workers or settings.worker_count
        self._executor = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="msfin-patch")

    def _sample(self, index: int, seed: int) -> PatchPair:
        rng = np.random.Generator(np.random.PCG64(seed))
        return sample_patch_pair(
            self.dataset.hr(index), self.scale, self.lr_patch, rng,
            image_id=self.dataset.name(index), augment=self.augment, lr=self.dataset.lr(index),
        )

    def sample_batch(self, batch: int, rng: np.random.Generator, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
        """(lr_up, hr) arrays of shape (batch, 3, s*p, s*p)."""
        picks = rng.integers(0, len(self.dataset), size=batch)
        seeds = rng.integers(0, np.iinfo(np.int64).max, size=batch)
        pairs = list(self._executor.map(self._sample, picks.tolist(), seeds.tolist()))
        lr_up = np.stack([p.lr_up for p in pairs]).astype(dtype)
        hr = np.stack([p.hr for p in pairs]).astype(dtype)
        return lr_up, hr

    def close(self) -> None:
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "PatchSampler":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
