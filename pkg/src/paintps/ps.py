"""Lambertian photometric stereo on a flat-fielded stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .raster import ImageStack, to_luminance

MIN_ALBEDO = 1e-6
MAX_CONDITION = 1e8


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


@dataclass
class AlbedoMap:
    k: np.ndarray  # (H, W)
    color: np.ndarray | None = None  # (H, W, 3)


def solve_ps(stack: ImageStack, lights) -> tuple[NormalMap, AlbedoMap]:
    """Ordinary least squares for the albedo-scaled normal at every pixel.

    ``lights`` is a LightSet or an (n, 3) array of unit directions.
    Unsolvable pixels get normal (0, 0, 1), albedo 0 and ``valid=False``.
    """
    dirs = np.asarray(getattr(lights, "directions", lights), dtype=np.float64)
    if dirs.shape != (stack.n, 3):
        raise InputError(f"{len(dirs)} lights for {stack.n} images")
    gram = dirs.T @ dirs
    s = np.linalg.svd(dirs, compute_uv=False)
    if s[-1] <= 0 or np.linalg.cond(gram) > MAX_CONDITION:
        raise NumericalError("degenerate light geometry")

    h, w = stack.shape
    intensity = stack.as_array().reshape(stack.n, -1)
    scaled = np.linalg.solve(gram, dirs.T @ intensity).T  # (P, 3)
    k = np.linalg.norm(scaled, axis=1)
    valid = (k >= MIN_ALBEDO) & (scaled[:, 2] > 0)
    normals = np.zeros_like(scaled)
    normals[:, 2] = 1.0
    normals[valid] = scaled[valid] / k[valid, None]
    k = np.where(valid, k, 0.0)
    return (
        NormalMap(normals.reshape(h, w, 3), valid.reshape(h, w)),
        AlbedoMap(k.reshape(h, w)),
    )


def colorize_albedo(albedo: AlbedoMap, color_reference: np.ndarray | None) -> AlbedoMap:
    """Scale the reference colour per pixel so its luminance equals k."""
    if color_reference is None:
        return AlbedoMap(albedo.k, None)
    ref = np.asarray(color_reference, dtype=np.float64)
    if ref.ndim == 2:
        ref = np.repeat(ref[..., None], 3, axis=-1)
    if ref.shape[:2] != albedo.k.shape:
        raise InputError("dimension mismatch: color reference")
    lum = to_luminance(ref)
    gain = np.divide(albedo.k, lum, out=np.zeros_like(lum), where=lum > 0)
    color = ref[..., :3] * gain[..., None]
    gray = (ref[..., 0] == ref[..., 1]) & (ref[..., 1] == ref[..., 2]) & (lum > 0)
    color[gray] = albedo.k[gray, None]
    return AlbedoMap(albedo.k, color)


def reprojection_rmse(stack: ImageStack, lights, normals: NormalMap, albedo: AlbedoMap) -> float:
    dirs = np.asarray(getattr(lights, "directions", lights), dtype=np.float64)
    n = normals.normals[normals.valid]
    k = albedo.k[normals.valid]
    pred = k[None, :] * np.maximum(dirs @ n.T, 0.0)
    obs = stack.as_array()[:, normals.valid]
    return float(np.sqrt(np.mean((obs - pred) ** 2)))

