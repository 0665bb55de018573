"""File-mediated stages and the end-to-end run.

Each stage reads only files written by earlier stages (or user inputs) and
writes its own outputs into a directory, so any stage can be rerun alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, calibration, detection, integration, ps, stats
from .errors import InputError, PaintPSError
from .raster import (
    load_region_partition, load_stack, read_image, read_raw, write_png8, write_tiff16,
    write_tiff_float,
)

log = logging.getLogger(__name__)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _fit_json(fit: calibration.PolySurface) -> dict:
    return {"degree": fit.degree, "mean_value": fit.mean_value,
            "coefficients": fit.coefficients.tolist(), "shape": list(fit.shape)}


def _fit_from_json(obj: dict) -> calibration.PolySurface:
    return calibration.PolySurface(int(obj["degree"]), np.asarray(obj["coefficients"], float),
                                   float(obj["mean_value"]), tuple(obj["shape"]))


def run_calibrate(manifest, out, degree=2, window_deg=15.0, elevation=None, write_flat=False,
                  threads=1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stack = load_stack(manifest, threads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        cal = calibration.calibrate(stack, degree, elevations=elevation, window_deg=window_deg,
                                    executor=pool)
    doc = cal.lights.to_json()
    doc["fits"] = [_fit_json(f) for f in cal.lights.fits]
    doc["initial_elevation_deg"] = [float(e) for e in cal.initial_elevations]
    doc["cost_history"] = [float(c) for c in cal.lights.cost_history]
    _dump(doc, out / "lights.json")
    if write_flat:
        flat_dir = out / "flat"
        flat_dir.mkdir(exist_ok=True)
        peak = max(float(im.max()) for im in cal.flat_stack.images)
        scale = 1.0 / peak if peak > 1.0 else 1.0
        names = []
        for i, im in enumerate(cal.flat_stack.images):
            names.append(f"flat_{i:02d}.tif")
            write_tiff16(flat_dir / names[-1], im * scale)
        _dump({"images": names, "pixel_pitch_um": stack.pixel_pitch_um, "scale": scale},
              flat_dir / "manifest.json")
    return {"residual": cal.lights.residual, "iterations": len(cal.lights.cost_history) - 1,
            "converged": cal.lights.converged, "warning": cal.lights.warning}


def run_solve(manifest, lights_path, out, threads=1) -> dict:
    """Flat-field with the stored fits, then solve; writes normals/albedo/validity."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stack = load_stack(manifest, threads)
    doc = _load_json(lights_path)
    lights = calibration.LightSet.from_json(doc)
    if lights.n != stack.n:
        raise InputError(f"{lights_path}: {lights.n} lights for {stack.n} images")
    fits = [_fit_from_json(f) for f in doc.get("fits", [])]
    if fits:
        stack = stack.with_images([calibration.flat_field(im, f) for im, f in zip(stack.images, fits)])
    normals, albedo = ps.solve_ps(stack, lights)
    albedo = ps.colorize_albedo(albedo, stack.color_reference)

    write_tiff16(out / "normals.tif", 0.5 * (normals.normals + 1.0))
    kmax = float(albedo.k.max())
    scale = 1.0 / kmax if kmax > 1.0 else 1.0
    write_tiff16(out / "albedo.tif", albedo.k * scale)
    if albedo.color is not None:
        write_tiff16(out / "albedo_color.tif", np.clip(albedo.color * scale, 0.0, 1.0))
    write_png8(out / "validity.png", (normals.valid * 255).astype(np.uint8))
    rmse = ps.reprojection_rmse(stack, lights, normals, albedo)
    info = {"pixel_pitch_um": stack.pixel_pitch_um, "albedo_scale": scale,
            "valid_fraction": float(normals.valid.mean()), "reprojection_rmse": rmse}
    _dump(info, out / "solve.json")
    return info


def read_normals(path, validity=None) -> ps.NormalMap:
    raw = read_image(path)
    if raw.ndim != 3:
        raise InputError(f"{path}: expected a 3-channel normal map")
    n = 2.0 * raw - 1.0
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    valid = read_raw(validity) > 0 if validity else np.ones(n.shape[:2], bool)
    if valid.shape != n.shape[:2]:
        raise InputError(f"dimension mismatch: {validity}")
    return ps.NormalMap(n, valid)


def run_integrate(normals_path, pitch_um, out, validity=None, mesh=False, threads=1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    normals = read_normals(normals_path, validity)
    grad = integration.normals_to_gradients(normals)
    depth = integration.integrate_frankot_chellappa(grad, pitch_um, workers=threads)
    write_tiff_float(out / "depth.tif", depth)
    info = {"depth_min_um": float(depth.min()), "depth_max_um": float(depth.max())}
    if mesh:
        nv, nf = integration.export_mesh(depth, pitch_um, out / "mesh.ply")
        info.update(mesh_vertices=nv, mesh_faces=nf)
    return info


def run_detect(albedo_path, depth_path, regions_path, pitch_um, out, manual=None,
               albedo_params=detection.AlbedoParams(), depth_params=detection.DepthParams(),
               min_area=detection.MIN_AREA, region_names=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    albedo = read_image(albedo_path)
    if albedo.ndim == 3:
        albedo = albedo.mean(axis=-1)
    depth = read_raw(depth_path).astype(np.float64)
    if depth.shape != albedo.shape:
        raise InputError(f"dimension mismatch: {depth_path} vs {albedo_path}")
    partition = load_region_partition(regions_path, albedo.shape, region_names)

    amask = detection.albedo_candidates(albedo, albedo_params)
    blobs = detection.detect_blobs(depth, pitch_um, depth_params)
    dmask = detection.blob_mask(blobs, depth.shape)
    prov = detection.params_dict(albedo_params, depth_params, min_area)
    auto = detection.fuse_and_label(amask, dmask, partition, pitch_um, depth, min_area, prov)
    detection.write_csv(auto, out / "protrusions.csv")
    manual_mask = None
    info = {"automated": len(auto), "blobs": len(blobs)}
    if manual:
        mset = detection.ingest_manual(manual, partition, pitch_um, depth, min_area)
        detection.write_csv(mset, out / "manual_protrusions.csv")
        manual_mask = read_raw(manual)
        manual_mask = (manual_mask.max(axis=-1) if manual_mask.ndim == 3 else manual_mask) > 0
        info["manual"] = len(mset)
    write_png8(out / "overlay.png", detection.overlay(albedo, amask | dmask, manual_mask))
    _dump(prov, out / "detect_params.json")
    return info


def run_stats(csv_path, regions_path, pitch_um, out, bin_width_um=100.0, fine_bins=False,
              reference_csv=None, region_names=None) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pset = detection.read_csv(csv_path)
    ref = detection.read_csv(reference_csv) if reference_csv else None
    raw = read_raw(regions_path)
    partition = load_region_partition(regions_path, raw.shape[:2], region_names)
    widths = np.concatenate([pset.widths(), ref.widths() if ref else np.empty(0)])
    wmax = float(widths.max()) if len(widths) else 0.0
    edges = stats.fine_edges(wmax) if fine_bins else stats.uniform_edges(wmax, bin_width_um)
    auto = stats.compute_stats(pset, partition, pitch_um, edges=edges)
    doc = {"pixel_pitch_um": pitch_um, "bin_edges_um": [float(e) for e in edges],
           "regions": [s.to_json() for s in auto]}
    if ref is not None:
        manual = stats.compute_stats(ref, partition, pitch_um, edges=edges)
        doc["reference"] = [s.to_json() for s in manual]
        doc["comparison"] = stats.compare_methods(manual, auto)
    _dump(doc, out / "stats.json")
    stats.write_histogram_csv(auto, out / "histogram.csv")
    stats.write_histogram_svg(auto, out / "histogram.svg")
    return {"regions": len(auto), "total": int(sum(s.count for s in auto)),
            "rank_correlation": doc.get("comparison", {}).get("rank_correlation")}


@dataclass
class RunConfig:
    manifest: str
    regions: str
    out: str
    manual: str | None = None
    region_names: list | None = None
    seed: int = 0
    threads: int = 1
    degree: int = 2
    window_deg: float = 15.0
    elevation: float | None = None
    mesh: bool = False
    albedo: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    min_area: int = detection.MIN_AREA
    bin_width_um: float = 100.0
    fine_bins: bool = False

    @classmethod
    def from_json(cls, path, **overrides) -> "RunConfig":
        doc = _load_json(path)
        base = Path(path).parent
        for key in ("manifest", "regions", "manual", "out"):
            if doc.get(key):
                doc[key] = str(base / doc[key])
        doc.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InputError(f"{path}: {exc}") from exc

    def validate(self) -> None:
        for name in ("manifest", "regions", "manual"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise InputError(f"missing {name}: {value}")


class StageError(PaintPSError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config: RunConfig) -> dict:
    """Chain every stage through files in ``config.out``; returns the report."""
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".partial"
    marker.write_text("running\n")
    np.random.seed(config.seed)

    albedo_params = detection.AlbedoParams(**{
        **config.albedo, **({"template_sigmas": tuple(config.albedo["template_sigmas"])}
                           if "template_sigmas" in config.albedo else {})})
    depth_params = detection.DepthParams(**config.depth)
    stack_pitch = _load_json(config.manifest).get("pixel_pitch_um")

    stages = [
        ("calibrate", lambda: run_calibrate(config.manifest, out, config.degree, config.window_deg,
                                            config.elevation, threads=config.threads)),
        ("solve", lambda: run_solve(config.manifest, out / "lights.json", out, config.threads)),
        ("integrate", lambda: run_integrate(out / "normals.tif", stack_pitch, out, out / "validity.png",
                                            config.mesh, config.threads)),
        ("detect", lambda: run_detect(out / "albedo.tif", out / "depth.tif", config.regions, stack_pitch,
                                      out, config.manual, albedo_params, depth_params, config.min_area,
                                      config.region_names)),
        ("stats", lambda: run_stats(out / "protrusions.csv", config.regions, stack_pitch, out,
                                    config.bin_width_um, config.fine_bins,
                                    out / "manual_protrusions.csv" if config.manual else None,
                                    config.region_names)),
    ]
    timings = {}
    results = {}
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            results[name] = fn()
        except Exception as exc:
            marker.write_text(f"failed at stage {name}: {exc}\n")
            raise StageError(name, exc) from exc
        timings[name] = round(time.perf_counter() - t0, 4)
        log.info("stage %s done in %.2fs", name, timings[name])

    digests = {
        p.name: sha256(p)
        for p in sorted(out.iterdir())
        if p.is_file() and p.suffix in (".json", ".csv", ".tif", ".png", ".svg", ".ply")
        and p.name != "run_report.json"
    }
    # the report holds only what determines the results; where and how fast
    # the run happened goes to run_log.txt so reruns compare byte for byte
    params = {k: v for k, v in asdict(config).items() if k not in ("out", "threads")}
    report = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "parameters": params,
        "stages": results,
        "digests": digests,
    }
    _dump(report, out / "run_report.json")
    lines = [f"threads {config.threads}", f"out {out}"]
    lines += [f"{name} {t:.4f}s" for name, t in timings.items()]
    (out / "run_log.txt").write_text("\n".join(lines) + "\n")
    marker.unlink()
    return {**report, "timings_s": timings}
