"""Protrusion candidates from albedo and depth, fusion, labelling, measurement."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, signal

from .errors import InputError
from .raster import RegionPartition, read_raw

MIN_AREA = 4
EIGHT = np.ones((3, 3), dtype=bool)
CSV_FIELDS = ("id", "x", "y", "area_px", "width_um", "peak_um", "source", "region")


@dataclass(frozen=True)
class AlbedoParams:
    window: int = 51
    sigma_k: float = 3.0
    template_sigmas: tuple = (2.0, 4.0, 8.0, 16.0)
    ncc_min: float = 0.5
    stride: int = 3  # lattice step for the local median/MAD; 1 is exact
    mad_floor: float = 0.005  # fraction of the local median


@dataclass(frozen=True)
class DepthParams:
    h_min_um: float = 5.0
    min_width_um: float = 20.0
    max_width_um: float = 600.0
    n_scales: int = 12


@dataclass(frozen=True)
class ProtrusionRecord:
    id: int
    x: float
    y: float
    area_px: int
    equivalent_width_um: float
    peak_height_um: float
    source: str
    region_label: int

    def row(self) -> dict:
        return {
            "id": self.id, "x": f"{self.x:.4f}", "y": f"{self.y:.4f}", "area_px": self.area_px,
            "width_um": f"{self.equivalent_width_um:.6f}", "peak_um": f"{self.peak_height_um:.6f}",
            "source": self.source, "region": self.region_label,
        }


@dataclass
class ProtrusionSet:
    records: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def widths(self) -> np.ndarray:
        return np.array([r.equivalent_width_um for r in self.records], dtype=np.float64)


def equivalent_width(area_px, pitch_um: float) -> float:
    return 2.0 * math.sqrt(area_px / math.pi) * pitch_um


def local_median(a: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """Moving-window median, optionally evaluated on a coarser lattice.

    With ``stride > 1`` the window is subsampled by ``stride`` in both axes
    and the coarse result is bilinearly interpolated back to full size.
    """
    if stride <= 1:
        return ndimage.median_filter(a, size=window, mode="reflect")
    sub = a[::stride, ::stride]
    win = max(3, (window // stride) | 1)
    med = ndimage.median_filter(sub, size=win, mode="reflect")
    h, w = a.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64) / stride
    return ndimage.map_coordinates(med, [rows, cols], order=1, mode="nearest")


def gaussian_template(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))


def normalized_cross_correlation(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean NCC of ``template`` centred on every pixel (reflect padding)."""
    t = template - template.mean()
    tnorm = np.sqrt(np.sum(t * t))
    r = template.shape[0] // 2
    a = image - image.mean()
    padded = np.pad(a, r, mode="reflect")
    num = signal.fftconvolve(padded, t[::-1, ::-1], mode="valid")
    size = template.shape[0]
    s1 = ndimage.uniform_filter(padded, size, mode="reflect")[r:-r, r:-r]
    s2 = ndimage.uniform_filter(padded * padded, size, mode="reflect")[r:-r, r:-r]
    var = np.maximum(s2 - s1 * s1, 0.0) * size * size
    den = np.sqrt(var) * tnorm
    scale = max(float(np.abs(a).max()), 1e-300)
    ok = den > 1e-9 * scale * tnorm
    return np.divide(num, den, out=np.zeros_like(num), where=ok)


def albedo_candidates(albedo, params: AlbedoParams = AlbedoParams()) -> np.ndarray:
    """Pixels that are locally bright (median + s*MAD) and spot-shaped (NCC)."""
    a = np.asarray(getattr(albedo, "k", albedo), dtype=np.float64)
    med = local_median(a, params.window, params.stride)
    mad = local_median(np.abs(a - med), params.window, params.stride)
    mad = np.maximum(mad, params.mad_floor * np.abs(med))
    bright = a > med + params.sigma_k * mad
    if not bright.any():
        return bright
    ncc = np.full(a.shape, -np.inf)
    for s in params.template_sigmas:
        if 2 * math.ceil(3 * s) + 1 > min(a.shape):
            continue
        ncc = np.maximum(ncc, normalized_cross_correlation(a, gaussian_template(s)))
    return bright & (ncc > params.ncc_min)


@dataclass(frozen=True)
class Blob:
    x: float
    y: float
    sigma_px: float
    response_um: float

    @property
    def radius_px(self) -> float:
        return self.sigma_px * math.sqrt(2.0)


def detect_blobs(depth_um: np.ndarray, pitch_um: float, params: DepthParams = DepthParams()) -> list:
    """Scale-space maxima of the scale-normalised Laplacian of -depth.

    A least-squares plane is removed first: a residual tilt would otherwise
    fold into a ridge at the reflected image border.
    """
    z = detrend_plane(depth_um)
    widths = np.geomspace(params.min_width_um, params.max_width_um, params.n_scales)
    # blob diameter 2*sqrt(2)*sigma; sub-pixel scales are not resolvable
    sigmas = np.unique(np.round(np.maximum(widths / (2.0 * math.sqrt(2.0) * pitch_um), 1.0), 6))
    sigmas = sigmas[2 * np.ceil(4 * sigmas) + 1 <= 2 * max(z.shape)]
    if len(sigmas) == 0:
        return []
    cube = np.stack([-(s * s) * ndimage.gaussian_laplace(z, s, mode="reflect") for s in sigmas])
    peaks = (cube == ndimage.maximum_filter(cube, size=3, mode="nearest")) & (cube >= params.h_min_um)
    k, rows, cols = np.nonzero(peaks)
    order = np.lexsort((cols, rows, -cube[k, rows, cols]))
    kept: list[Blob] = []
    for i in order:
        b = Blob(float(cols[i]), float(rows[i]), float(sigmas[k[i]]), float(cube[k[i], rows[i], cols[i]]))
        if any(math.hypot(b.x - o.x, b.y - o.y) < max(b.radius_px, o.radius_px) for o in kept):
            continue
        kept.append(b)
    return kept


def detrend_plane(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    h, w = z.shape
    yy, xx = np.mgrid[0:h, 0:w]
    a = np.stack([np.ones(z.size), xx.ravel() - (w - 1) / 2.0, yy.ravel() - (h - 1) / 2.0], axis=1)
    coef = np.linalg.lstsq(a, z.ravel(), rcond=None)[0]
    return z - (a @ coef).reshape(h, w)


def blob_mask(blobs, shape) -> np.ndarray:
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for b in blobs:
        r = b.radius_px
        y0, y1 = max(0, int(b.y - r) - 1), min(h, int(b.y + r) + 2)
        x0, x1 = max(0, int(b.x - r) - 1), min(w, int(b.x + r) + 2)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= (xx - b.x) ** 2 + (yy - b.y) ** 2 <= r * r
    return mask


def depth_candidates(depth_um, pitch_um: float, params: DepthParams = DepthParams()) -> np.ndarray:
    z = np.asarray(depth_um, dtype=np.float64)
    return blob_mask(detect_blobs(z, pitch_um, params), z.shape)


def _measure(mask, pitch_um, partition, depth, min_area, tag):
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    sources = tag(labels, idx)
    areas = ndimage.sum_labels(np.ones(mask.shape), labels, idx).astype(int)
    centroids = ndimage.center_of_mass(np.ones(mask.shape), labels, idx)
    slices = ndimage.find_objects(labels)
    h, w = mask.shape
    records = []
    for lab, area, (cy, cx), sl, src in zip(idx, areas, centroids, slices, sources):
        if area < min_area:
            continue
        region = 0
        if partition is not None:
            region = int(partition.labels[min(h - 1, int(round(cy))), min(w - 1, int(round(cx)))])
        peak = 0.0
        if depth is not None:
            # local window around the component, grown by 3 px for the ring
            y0, y1 = max(0, sl[0].start - 3), min(h, sl[0].stop + 3)
            x0, x1 = max(0, sl[1].start - 3), min(w, sl[1].stop + 3)
            comp = labels[y0:y1, x0:x1] == lab
            ring = ndimage.binary_dilation(comp, EIGHT, iterations=2) & ~comp
            zwin = depth[y0:y1, x0:x1]
            base = float(np.median(zwin[ring])) if ring.any() else 0.0
            peak = float(zwin[comp].max()) - base
        records.append((cx, cy, int(area), region, peak, src))
    return [
        ProtrusionRecord(i + 1, cx, cy, area, equivalent_width(area, pitch_um), peak, src, region)
        for i, (cx, cy, area, region, peak, src) in enumerate(records)
    ]


def fuse_and_label(albedo_mask, depth_mask, partition: RegionPartition | None, pitch_um: float,
                   depth=None, min_area: int = MIN_AREA, provenance=None) -> ProtrusionSet:
    """Union of the two candidate masks, 8-connected components, measured."""
    a = np.asarray(albedo_mask, dtype=bool)
    d = np.asarray(depth_mask, dtype=bool)
    if a.shape != d.shape:
        raise InputError("candidate masks differ in shape")
    union = a | d

    def source(labels, idx):
        in_a = ndimage.maximum(a, labels, idx)
        in_d = ndimage.maximum(d, labels, idx)
        return ["union" if x and y else ("albedo" if x else "depth") for x, y in zip(in_a, in_d)]

    records = _measure(union, pitch_um, partition, depth, min_area, source)
    prov = {"min_area": min_area, **(provenance or {})}
    return ProtrusionSet(records, prov)


def ingest_manual(mask, partition: RegionPartition | None, pitch_um: float, depth=None,
                  min_area: int = MIN_AREA, shape=None) -> ProtrusionSet:
    """Measure an externally drawn protrusion mask (path or array)."""
    raw = read_raw(mask) if not isinstance(mask, np.ndarray) else mask
    if raw.ndim == 3:
        raw = raw[..., :3].max(axis=-1)
    ref = shape or (partition.labels.shape if partition is not None else None)
    if ref is not None and raw.shape != tuple(ref):
        raise InputError(f"dimension mismatch: manual mask {raw.shape}, expected {tuple(ref)}")
    records = _measure(raw > 0, pitch_um, partition, depth, min_area, lambda labels, idx: ["manual"] * len(idx))
    return ProtrusionSet(records, {"min_area": min_area, "source": "manual"})


def write_csv(pset: ProtrusionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in pset.records:
            writer.writerow(r.row())


def read_csv(path) -> ProtrusionSet:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ProtrusionRecord(
                int(row["id"]), float(row["x"]), float(row["y"]), int(row["area_px"]),
                float(row["width_um"]), float(row["peak_um"]), row["source"], int(row["region"]),
            ))
    return ProtrusionSet(records)


def overlay(albedo_k: np.ndarray, automated: np.ndarray, manual: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 albedo with automated outlines red and manual-only outlines yellow."""
    k = np.asarray(albedo_k, dtype=np.float64)
    top = np.percentile(k, 99.5) if k.size else 1.0
    gray = np.clip(k / top, 0.0, 1.0) if top > 0 else np.zeros_like(k)
    rgb = np.repeat((gray * 255).astype(np.uint8)[..., None], 3, axis=-1)

    def outline(m):
        return m & ~ndimage.binary_erosion(m, EIGHT, border_value=0)

    if manual is not None:
        lab, n = ndimage.label(manual, structure=EIGHT)
        hit = np.unique(lab[automated & (lab > 0)])
        manual_only = (lab > 0) & ~np.isin(lab, hit)
        rgb[outline(manual_only)] = (255, 255, 0)
    rgb[outline(np.asarray(automated, bool))] = (255, 0, 0)
    return rgb


def params_dict(albedo: AlbedoParams, depth: DepthParams, min_area: int) -> dict:
    a = asdict(albedo)
    a["template_sigmas"] = list(a["template_sigmas"])
    return {"albedo": a, "depth": asdict(depth), "min_area": min_area}
