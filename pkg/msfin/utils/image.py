"""Image ingestion, colour conversion, bicubic resampling and patch sampling.

Images are planar float64 arrays (C, H, W) with samples in [0, 1].
"""
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from msfin.core.exceptions import ImageError
from msfin.models.common import ColorSpace

KEYS_A = -0.5
DIHEDRAL_CODES = tuple(range(8))

_SPACE_CHANNELS = {ColorSpace.RGB: 3, ColorSpace.YCBCR: 3, ColorSpace.Y: 1}


class PlanarImage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    space: ColorSpace = ColorSpace.RGB

    @field_validator("data", mode="before")
    @classmethod
    def check_data(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 3 or min(value.shape) < 1:
            raise ValueError(f"expected non-empty (C, H, W) planes, got shape {value.shape}")
        return value

    @model_validator(mode="after")
    def check_space(self) -> "PlanarImage":
        if self.data.shape[0] != _SPACE_CHANNELS[self.space]:
            raise ValueError(f"{self.space.value} image needs {_SPACE_CHANNELS[self.space]} planes, "
                             f"got {self.data.shape[0]}")
        return self

    @classmethod
    def from_array(cls, data: np.ndarray, space: ColorSpace = ColorSpace.RGB) -> "PlanarImage":
        """Wrap planes, clamping to [0, 1]."""
        return cls(data=np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0), space=space)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def as_batch(self, dtype=np.float32) -> np.ndarray:
        """(1, C, H, W) array for the network."""
        return self.data[None].astype(dtype)

    def mod_crop(self, multiple: int) -> "PlanarImage":
        """Crop bottom/right so both extents are multiples of `multiple`."""
        h = self.height - self.height % multiple
        w = self.width - self.width % multiple
        if h < 1 or w < 1:
            raise ImageError(f"image {self.height}x{self.width} smaller than scale {multiple}")
        return PlanarImage(data=self.data[:, :h, :w], space=self.space)


# ----------------------------------------------------------------------------------------
# Bicubic resampling
# ----------------------------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel, support [-2, 2]."""
    absx = np.abs(x)
    absx2 = absx ** 2
    absx3 = absx ** 3
    near = ((a + 2) * absx3 - (a + 3) * absx2 + 1) * (absx <= 1)
    far = (a * absx3 - 5 * a * absx2 + 8 * a * absx - 4 * a) * ((absx > 1) & (absx <= 2))
    return near + far


def resize_weights(in_length: int, out_length: int, antialias: bool = True) -> np.ndarray:
    """(out_length, in_length) resampling matrix with rows summing to 1.

    Half-pixel-centred coordinates; when shrinking with antialias the kernel is stretched by
    the inverse scale. Out-of-range taps are clamped onto the edge samples.
    """
    scale = out_length / in_length
    kernel_width = 4.0
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)
        kernel_width /= scale
    else:
        kernel = cubic

    x = np.arange(1, out_length + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - kernel_width / 2)
    taps = int(np.ceil(kernel_width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - indices)
    weights = weights / weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices - 1, 0, in_length - 1).astype(np.int64)

    matrix = np.zeros((out_length, in_length), dtype=np.float64)
    rows = np.repeat(np.arange(out_length), taps)
    np.add.at(matrix, (rows, indices.reshape(-1)), weights.reshape(-1))
    return matrix


def resize_array(planes: np.ndarray, out_h: int, out_w: int, antialias: bool = True,
                 clamp: bool = True) -> np.ndarray:
    """Separable bicubic resize of (..., H, W) planes, clamped to [0, 1] unless told otherwise."""
    if out_h < 1 or out_w < 1:
        raise ImageError(f"target extents must be >= 1, got {out_h}x{out_w}")
    h, w = planes.shape[-2:]
    if (h, w) == (out_h, out_w):
        return planes.copy()
    rows = resize_weights(h, out_h, antialias)
    cols = resize_weights(w, out_w, antialias)
    out = np.einsum("oh,...hw,pw->...op", rows, planes, cols, optimize=True)
    return np.clip(out, 0.0, 1.0) if clamp else out


def bicubic_resize(img: PlanarImage, out_h: int, out_w: int, antialias: bool = True) -> PlanarImage:
    return PlanarImage(data=resize_array(img.data, out_h, out_w, antialias), space=img.space)


# ----------------------------------------------------------------------------------------
# Colour
# ----------------------------------------------------------------------------------------

# BT.601 studio-range transform, inputs in [0, 1], outputs in [0, 1].
_YCBCR_MATRIX = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
]) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0]) / 255.0


def _require_rgb(img: PlanarImage) -> None:
    if img.space is not ColorSpace.RGB:
        raise ImageError(f"expected an RGB image, got {img.space.value}")


def rgb_to_ycbcr(img: PlanarImage) -> PlanarImage:
    _require_rgb(img)
    data = np.einsum("kc,chw->khw", _YCBCR_MATRIX, img.data) + _YCBCR_OFFSET[:, None, None]
    return PlanarImage(data=data, space=ColorSpace.YCBCR)


def rgb_to_ycbcr_y(img: PlanarImage) -> PlanarImage:
    """Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255."""
    _require_rgb(img)
    y = np.einsum("c,chw->hw", _YCBCR_MATRIX[0], img.data) + _YCBCR_OFFSET[0]
    return PlanarImage(data=y[None], space=ColorSpace.Y)


# ----------------------------------------------------------------------------------------
# Dihedral augmentation
# ----------------------------------------------------------------------------------------

def dihedral(planes: np.ndarray, code: int) -> np.ndarray:
    """Rotate by 90 degrees (code % 4) times, then mirror horizontally when code >= 4."""
    if code not in DIHEDRAL_CODES:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    out = np.rot90(planes, code % 4, axes=(-2, -1))
    if code >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def inverse_dihedral(planes: np.ndarray, code: int) -> np.ndarray:
    if code not in DIHEDRAL_CODES:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    out = np.flip(planes, axis=-1) if code >= 4 else planes
    return np.ascontiguousarray(np.rot90(out, -(code % 4), axes=(-2, -1)))


# ----------------------------------------------------------------------------------------
# Patch sampling
# ----------------------------------------------------------------------------------------

class PatchPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lr: np.ndarray      # (3, p, p)
    lr_up: np.ndarray   # (3, s*p, s*p)
    hr: np.ndarray      # (3, s*p, s*p)
    image_id: str = ""
    offset: Tuple[int, int] = (0, 0)  # top-left of the HR crop
    augmentation: int = 0


def sample_patch_pair(
    hr: PlanarImage,
    scale: int,
    lr_patch: int,
    rng: np.random.Generator,
    image_id: str = "",
    augment: bool = True,
    lr: Optional[PlanarImage] = None,
) -> PatchPair:
    """Crop an aligned HR/LR patch pair, augment both identically, pre-upsample the LR member.

    Without `lr` the LR patch is the antialiased bicubic downscale of the HR crop; with it the
    crop is taken from `lr` at the matching position.
    """
    hr_patch = scale * lr_patch
    if hr.height < hr_patch or hr.width < hr_patch:
        raise ImageError(f"{image_id or 'image'} is {hr.height}x{hr.width}, needs at least {hr_patch}x{hr_patch}")

    if lr is None:
        y = int(rng.integers(0, hr.height - hr_patch + 1))
        x = int(rng.integers(0, hr.width - hr_patch + 1))
        hr_crop = hr.data[:, y:y + hr_patch, x:x + hr_patch]
        lr_crop = resize_array(hr_crop, lr_patch, lr_patch, antialias=True)
    else:
        if lr.height * scale > hr.height or lr.width * scale > hr.width:
            raise ImageError(f"{image_id or 'image'}: LR {lr.height}x{lr.width} does not match HR at x{scale}")
        if lr.height < lr_patch or lr.width < lr_patch:
            raise ImageError(f"{image_id or 'image'}: LR image smaller than patch {lr_patch}")
        ly = int(rng.integers(0, lr.height - lr_patch + 1))
        lx = int(rng.integers(0, lr.width - lr_patch + 1))
        y, x = ly * scale, lx * scale
        hr_crop = hr.data[:, y:y + hr_patch, x:x + hr_patch]
        lr_crop = lr.data[:, ly:ly + lr_patch, lx:lx + lr_patch]

    code = int(rng.integers(0, 8)) if augment else 0
    hr_aug = dihedral(hr_crop, code)
    lr_aug = dihedral(lr_crop, code)
    lr_up = resize_array(lr_aug, hr_patch, hr_patch, antialias=True)
    return PatchPair(lr=lr_aug, lr_up=lr_up, hr=hr_aug, image_id=image_id, offset=(y, x), augmentation=code)


def degrade(hr: PlanarImage, scale: int) -> Tuple[PlanarImage, PlanarImage]:
    """Bicubic LR image of a mod-cropped HR image and its pre-upsampled version."""
    lr = bicubic_resize(hr, hr.height // scale, hr.width // scale, antialias=True)
    return lr, bicubic_resize(lr, hr.height, hr.width, antialias=True)


# ----------------------------------------------------------------------------------------
# PNG I/O
# ----------------------------------------------------------------------------------------

_DEPTH_MAX = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}


def load_png(path: Union[str, Path]) -> PlanarImage:
    """Read an 8- or 16-bit PNG as RGB planes in [0, 1]; grey images are replicated to RGB."""
    try:
        pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    except cv2.error as e:
        raise ImageError(f"Cannot read image {path}: {str(e)}") from e
    if pixels is None:
        raise ImageError(f"Cannot read image {path}")
    peak = _DEPTH_MAX.get(pixels.dtype)
    if peak is None:
        raise ImageError(f"Unsupported bit depth {pixels.dtype} in {path}")
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    elif pixels.ndim == 3 and pixels.shape[2] == 4:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGRA2RGB)
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageError(f"Unsupported channel layout {pixels.shape} in {path}")
    return PlanarImage(data=pixels.transpose(2, 0, 1) / peak, space=ColorSpace.RGB)


def save_png(img: PlanarImage, path: Union[str, Path], bit_depth: int = 8) -> None:
    """Write RGB (or Y as greyscale) at 8 or 16 bits, rounding to the nearest code value."""
    if bit_depth not in (8, 16):
        raise ImageError(f"Unsupported bit depth {bit_depth}")
    dtype, peak = (np.uint8, 255.0) if bit_depth == 8 else (np.uint16, 65535.0)
    pixels = np.rint(np.clip(img.data, 0.0, 1.0) * peak).astype(dtype)
    if img.channels == 1:
        pixels = np.ascontiguousarray(pixels[0])
    else:
        pixels = cv2.cvtColor(np.ascontiguousarray(pixels.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        written = cv2.imwrite(str(path), pixels)
    except cv2.error as e:
        raise ImageError(f"Cannot write image {path}: {str(e)}") from e
    if not written:
        raise ImageError(f"Cannot write image {path}")
