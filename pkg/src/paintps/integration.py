"""Normals to gradients, Frankot-Chellappa integration and mesh export.

Gradients are dimensionless (height per unit lateral distance); depth maps
are in µm, positive towards the camera, zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft

from .errors import InputError

NZ_MIN = 0.05


@dataclass
class GradientField:
    p: np.ndarray  # dz/dx along columns
    q: np.ndarray  # dz/dy along rows


def normals_to_gradients(normals, nz_min: float = NZ_MIN) -> GradientField:
    """p = -nx/nz, q = -ny/nz with nz clamped from below.

    Accepts a NormalMap or an (H, W, 3) array; invalid pixels of a NormalMap
    get zero gradient.
    """
    arr = np.asarray(getattr(normals, "normals", normals), dtype=np.float64)
    nz = np.maximum(arr[..., 2], nz_min)
    p = -arr[..., 0] / nz
    q = -arr[..., 1] / nz
    valid = getattr(normals, "valid", None)
    if valid is not None:
        p = np.where(valid, p, 0.0)
        q = np.where(valid, q, 0.0)
    return GradientField(p, q)


def _mirror(a: np.ndarray, sign_x: float, sign_y: float) -> np.ndarray:
    top = np.concatenate([a, sign_x * a[:, ::-1]], axis=1)
    return np.concatenate([top, sign_y * top[::-1, :]], axis=0)


def _frequencies(shape):
    h, w = shape
    wy = 2.0 * np.pi * fft.fftfreq(h)[:, None]
    wx = 2.0 * np.pi * fft.fftfreq(w)[None, :]
    # the Nyquist term of a derivative is not representable in a real signal
    if h % 2 == 0:
        wy[h // 2] = 0.0
    if w % 2 == 0:
        wx[:, w // 2] = 0.0
    return wx, wy


def integrate_frankot_chellappa(grad: GradientField, pitch_um: float, padding: str = "mirror",
                                workers: int | None = None) -> np.ndarray:
    """Least-squares integrable surface for (p, q), returned in µm.

    ``padding="mirror"`` reflects the field to twice its size so the
    transform sees a continuous periodic surface; ``"none"`` assumes the
    input is already periodic.
    """
    if pitch_um <= 0:
        raise InputError("pitch must be positive")
    p = np.asarray(grad.p, dtype=np.float64)
    q = np.asarray(grad.q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError("gradient components differ in shape")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InputError("gradient field is not finite")
    h, w = p.shape
    if padding == "mirror":
        p, q = _mirror(p, -1.0, 1.0), _mirror(q, 1.0, -1.0)
    elif padding != "none":
        raise InputError(f"unknown padding {padding!r}")

    wx, wy = _frequencies(p.shape)
    denom = wx * wx + wy * wy
    zero = denom == 0  # DC, plus Nyquist-only bins
    denom[zero] = 1.0
    fp = fft.fft2(p, workers=workers)
    fq = fft.fft2(q, workers=workers)
    fz = (-1j * wx * fp - 1j * wy * fq) / denom
    fz[zero] = 0.0
    z = fft.ifft2(fz, workers=workers).real[:h, :w] * pitch_um
    return z - z.mean()


def differentiate(depth_um: np.ndarray, pitch_um: float, padding: str = "mirror",
                  workers: int | None = None) -> GradientField:
    """Spectral gradient of a depth map, consistent with the integrator."""
    z = np.asarray(depth_um, dtype=np.float64) / pitch_um
    h, w = z.shape
    if padding == "mirror":
        z = _mirror(z, 1.0, 1.0)
    elif padding != "none":
        raise InputError(f"unknown padding {padding!r}")
    wx, wy = _frequencies(z.shape)
    fz = fft.fft2(z, workers=workers)
    p = fft.ifft2(1j * wx * fz, workers=workers).real[:h, :w]
    q = fft.ifft2(1j * wy * fz, workers=workers).real[:h, :w]
    return GradientField(p, q)


def export_mesh(depth_um: np.ndarray, pitch_um: float, path) -> tuple[int, int]:
    """Write the depth map as an ASCII PLY triangle mesh; returns (vertices, faces)."""
    depth = np.asarray(depth_um, dtype=np.float64)
    h, w = depth.shape
    rows, cols = np.mgrid[0:h, 0:w]
    verts = np.column_stack([cols.ravel() * pitch_um, rows.ravel() * pitch_um, depth.ravel()])
    idx = np.arange(h * w).reshape(h, w)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, c, b]), np.column_stack([b, c, d])])
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(verts)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(tris)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    try:
        with open(Path(path), "w") as fh:
            fh.write(header)
            np.savetxt(fh, verts, fmt="%.6g")
            np.savetxt(fh, np.column_stack([np.full(len(tris), 3), tris]), fmt="%d")
    except OSError as exc:
        raise InputError(f"cannot write mesh {path}: {exc}") from exc
    return len(verts), len(tris)


def read_ply_counts(path) -> tuple[int, int]:
    nv = nf = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nf = int(line.split()[-1])
            elif line.startswith("end_header"):
                break
    return nv, nf
