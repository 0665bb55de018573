"""Raster containers, image IO and region masks.

Rasters are plain ``numpy`` arrays indexed ``[row, col]`` (``[y, x]``),
float64, linear light, nominal range [0, 1]. Colour rasters carry a
trailing channel axis of length 3.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import InputError

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])
MAX_LABELS = 255


@dataclass(frozen=True)
class ImageStack:
    images: tuple[np.ndarray, ...]
    pixel_pitch_um: float
    color_reference: np.ndarray | None = None
    paths: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.images) < 3:
            raise InputError(f"insufficient lights (need >=3), got {len(self.images)}")
        shape = self.images[0].shape
        for i, im in enumerate(self.images):
            if im.ndim != 2:
                raise InputError(f"image {i} is not single-channel")
            if im.shape != shape:
                raise InputError(f"dimension mismatch: image {i} has {im.shape}, expected {shape}")
            if not np.all(np.isfinite(im)):
                raise InputError(f"image {i} contains non-finite samples")
        if not self.pixel_pitch_um > 0:
            raise InputError(f"pixel_pitch_um must be positive, got {self.pixel_pitch_um}")
        if self.color_reference is not None and self.color_reference.shape[:2] != shape:
            raise InputError("dimension mismatch: color_reference")

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images[0].shape

    def as_array(self) -> np.ndarray:
        """Images stacked along axis 0, shape (n, H, W)."""
        return np.stack(self.images)

    def with_images(self, images) -> "ImageStack":
        return ImageStack(tuple(images), self.pixel_pitch_um, self.color_reference, self.paths)


@dataclass(frozen=True)
class RegionPartition:
    labels: np.ndarray
    region_names: tuple[str, ...]

    def __post_init__(self):
        k = len(self.region_names)
        if self.labels.min() < 0 or self.labels.max() > k:
            raise InputError(f"region labels must lie in 0..{k}")

    @property
    def k(self) -> int:
        return len(self.region_names)

    def pixel_counts(self) -> np.ndarray:
        """Pixels per label, index 0 is background."""
        return np.bincount(self.labels.ravel(), minlength=self.k + 1)


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    if rgb.ndim == 2:
        return rgb
    # a gray pixel must map to itself exactly, which a dot product does not
    # guarantee in floating point
    out = rgb[..., :3] @ LUMA_WEIGHTS
    gray = (rgb[..., 0] == rgb[..., 1]) & (rgb[..., 1] == rgb[..., 2])
    out[gray] = rgb[..., 0][gray]
    return out


def _scale(raw: np.ndarray, path) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    if raw.dtype.kind == "f":
        return raw.astype(np.float64)
    if raw.dtype == bool:
        return raw.astype(np.float64)
    raise InputError(f"{path}: unsupported sample type {raw.dtype}")


def read_raw(path) -> np.ndarray:
    """Decode a PNG or TIFF without rescaling."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file: {path}")
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            raw = tifffile.imread(path)
        else:
            with Image.open(path) as im:
                # palette images decode to their indices, which masks rely on
                raw = np.asarray(im)
                if im.mode.startswith("I;16") or (im.mode == "I" and raw.max() < 65536):
                    raw = raw.astype(np.uint16)
    except InputError:
        raise
    except Exception as exc:  # decoder errors vary by backend
        raise InputError(f"cannot decode {path}: {exc}") from exc
    if raw.ndim == 3 and raw.shape[0] in (3, 4) and raw.shape[-1] not in (3, 4):
        raw = np.moveaxis(raw, 0, -1)
    return raw


def read_image(path, gamma: float | None = None) -> np.ndarray:
    """Load an image as float64 in [0, 1]; colour is kept as (H, W, 3)."""
    raw = read_raw(path)
    img = _scale(raw, path)
    if img.ndim == 3:
        img = img[..., :3]
    if gamma:
        img = np.power(np.clip(img, 0.0, None), gamma)
    if not np.all(np.isfinite(img)):
        raise InputError(f"{path}: non-finite samples")
    return img


def read_gray(path, gamma: float | None = None) -> np.ndarray:
    return to_luminance(read_image(path, gamma))


def quantize16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_tiff16(path, img: np.ndarray) -> None:
    """Write [0, 1] data as 16-bit TIFF (grayscale or RGB)."""
    data = quantize16(img)
    tifffile.imwrite(path, data, photometric="rgb" if data.ndim == 3 else "minisblack")


def write_tiff_float(path, img: np.ndarray) -> None:
    tifffile.imwrite(path, np.asarray(img, dtype=np.float32), photometric="minisblack")


def write_png8(path, img: np.ndarray) -> None:
    """Write uint8 data (or a [0, 1] float image) as PNG."""
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path, optimize=False)


def write_png16(path, img: np.ndarray) -> None:
    Image.fromarray(quantize16(img)).save(path)


def load_stack(manifest_path, threads: int = 1) -> ImageStack:
    """Read a JSON manifest and decode its images in manifest order."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise InputError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{manifest_path}: invalid JSON ({exc})") from exc
    base = manifest_path.parent

    paths = manifest.get("images")
    if not isinstance(paths, list):
        raise InputError(f"{manifest_path}: field 'images' must be a list")
    if len(paths) < 3:
        raise InputError(f"insufficient lights (need >=3), manifest lists {len(paths)}")
    pitch = manifest.get("pixel_pitch_um")
    if pitch is None:
        raise InputError(f"{manifest_path}: field 'pixel_pitch_um' missing")
    if not isinstance(pitch, (int, float)) or pitch <= 0:
        raise InputError(f"{manifest_path}: field 'pixel_pitch_um' must be positive, got {pitch!r}")
    gamma = manifest.get("gamma")

    full = [base / p for p in paths]
    for p in full:
        if not p.exists():
            raise InputError(f"missing file: {p}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        images = list(pool.map(lambda p: read_gray(p, gamma), full))
    shape = images[0].shape
    for p, im in zip(full, images):
        if im.shape != shape:
            raise InputError(f"dimension mismatch: {p} is {im.shape}, expected {shape}")

    color = None
    if manifest.get("color_reference"):
        cpath = base / manifest["color_reference"]
        color = read_image(cpath, gamma)
        if color.ndim == 2:
            color = np.repeat(color[..., None], 3, axis=-1)
        if color.shape[:2] != shape:
            raise InputError(f"dimension mismatch: {cpath} is {color.shape[:2]}, expected {shape}")
    return ImageStack(tuple(images), float(pitch), color, tuple(str(p) for p in full))


def load_region_partition(path, stack_or_shape, names=None) -> RegionPartition:
    """Read a label mask; distinct values map to 0..K in ascending order.

    Value 0 stays background. ``names`` defaults to ``region_1 .. region_K``.
    """
    raw = read_raw(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    shape = stack_or_shape.shape if hasattr(stack_or_shape, "shape") else tuple(stack_or_shape)
    shape = tuple(shape[:2])
    if raw.shape != shape:
        raise InputError(f"dimension mismatch: {path} is {raw.shape}, expected {shape}")
    labels, k = relabel(raw)
    if k > MAX_LABELS:
        raise InputError(f"{path}: {k} labels exceeds the limit of {MAX_LABELS}")
    if k == 0:
        raise InputError(f"{path}: no foreground region")
    if names is None:
        names = [f"region_{i}" for i in range(1, k + 1)]
    if len(names) != k:
        raise InputError(f"{path}: {k} regions but {len(names)} names")
    return RegionPartition(labels, tuple(names))


def relabel(values: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(values, return_inverse=True)
    inv = inv.reshape(values.shape)
    if uniq[0] != 0:
        inv = inv + 1
    k = len(uniq) - (1 if uniq[0] == 0 else 0)
    return inv.astype(np.int32), k
