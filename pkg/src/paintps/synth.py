"""Ground-truth scenes and a point-light Lambertian renderer.

Heights are in µm, positions in pixels unless a name says otherwise.
Surface gradients are evaluated analytically, never by finite differences,
so the renderer stays independent of the integration code it validates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .raster import write_png8, write_tiff16

SHAPES = ("dome", "caldera")
PIT_DEPTH = 0.6  # caldera pit depth as a fraction of dome height
PIT_SIGMA = 1.0 / 3.0  # pit Gaussian sigma as a fraction of the dome radius


@dataclass(frozen=True)
class Protrusion:
    id: int
    x: float
    y: float
    width_um: float
    height_um: float
    shape: str = "dome"
    albedo_gain: float = 0.3
    region: int = 0

    def to_json(self) -> dict:
        return {
            "id": self.id, "x": self.x, "y": self.y, "width_um": self.width_um,
            "height_um": self.height_um, "shape": self.shape,
            "albedo_gain": self.albedo_gain, "region": self.region,
        }


@dataclass
class SyntheticScene:
    height_um: np.ndarray
    grad_x: np.ndarray  # dz/dx, dimensionless (µm per µm)
    grad_y: np.ndarray
    albedo: np.ndarray
    protrusions: list
    pitch_um: float
    regions: np.ndarray | None = None
    region_names: list = field(default_factory=list)
    color: np.ndarray | None = None

    @property
    def shape(self):
        return self.height_um.shape

    def normals(self) -> np.ndarray:
        n = np.stack([-self.grad_x, -self.grad_y, np.ones_like(self.grad_x)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def footprint_mask(self) -> np.ndarray:
        h, w = self.shape
        rows, cols = np.mgrid[0:h, 0:w]
        mask = np.zeros((h, w), bool)
        for p in self.protrusions:
            r = 0.5 * p.width_um / self.pitch_um
            mask |= (cols - p.x) ** 2 + (rows - p.y) ** 2 < r * r
        return mask

    def center_um(self) -> np.ndarray:
        h, w = self.shape
        return np.array([0.5 * (w - 1) * self.pitch_um, 0.5 * (h - 1) * self.pitch_um, 0.0])


def _dome(dx, dy, radius, height, shape):
    """Height and gradient of one protrusion; dx, dy, radius in µm."""
    r2 = dx * dx + dy * dy
    inside = r2 < radius * radius
    u = np.where(inside, 1.0 - r2 / radius**2, 0.0)
    z = height * u
    gx = np.where(inside, -2.0 * height * dx / radius**2, 0.0)
    gy = np.where(inside, -2.0 * height * dy / radius**2, 0.0)
    if shape == "caldera":
        s2 = (PIT_SIGMA * radius) ** 2
        g = np.exp(-r2 / (2.0 * s2))
        depth = PIT_DEPTH * height
        # taper the pit with u^2 so height and slope stay continuous at the rim
        pit = depth * g * u * u
        dpit_dr2 = depth * (-g / (2.0 * s2) * u * u + g * 2.0 * u * (-1.0 / radius**2))
        z = z - pit
        gx = gx - np.where(inside, 2.0 * dx * dpit_dr2, 0.0)
        gy = gy - np.where(inside, 2.0 * dy * dpit_dr2, 0.0)
    return z, gx, gy


def make_scene(spec: dict) -> SyntheticScene:
    """Build a scene from a JSON-style dict.

    Keys: ``width``, ``height`` (px), ``pitch_um``, ``albedo``, optional
    ``protrusions`` (list of dicts with ``x``, ``y`` in px, ``width_um``,
    ``height_um``, ``shape``, ``albedo_gain``), ``texture`` (``amplitude_um``,
    ``wavelength_um``, ``angle_deg``), ``regions`` (list of ``name``,
    ``box`` [x0, y0, x1, y1] px, optional ``albedo`` and ``color``),
    ``hemisphere`` (``x``, ``y``, ``radius_px``) and ``allow_overlap``.
    """
    try:
        w = int(spec["width"])
        h = int(spec["height"])
        pitch = float(spec["pitch_um"])
    except KeyError as exc:
        raise InputError(f"scene spec missing field {exc}") from exc
    if w < 2 or h < 2 or pitch <= 0:
        raise InputError("scene needs width, height >= 2 and a positive pitch")
    base = float(spec.get("albedo", 0.6))

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    xu, yu = cols * pitch, rows * pitch
    z = np.zeros((h, w))
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    albedo = np.full((h, w), base)
    color = None

    labels = None
    names = []
    if spec.get("regions"):
        labels = np.zeros((h, w), np.int32)
        color = np.repeat(albedo[..., None], 3, axis=-1)
        for i, reg in enumerate(spec["regions"], start=1):
            x0, y0, x1, y1 = (int(v) for v in reg["box"])
            labels[y0:y1, x0:x1] = i
            albedo[y0:y1, x0:x1] = float(reg.get("albedo", base))
            names.append(reg.get("name", f"region_{i}"))
        tint = np.ones((len(names) + 1, 3))
        for i, reg in enumerate(spec["regions"], start=1):
            if "color" in reg:
                tint[i] = np.asarray(reg["color"], float)
        color = albedo[..., None] * tint[labels]

    tex = spec.get("texture")
    if tex:
        amp = float(tex["amplitude_um"])
        k = 2.0 * math.pi / float(tex["wavelength_um"])
        ang = math.radians(float(tex.get("angle_deg", 0.0)))
        phase = k * (xu * math.cos(ang) + yu * math.sin(ang))
        z += amp * np.sin(phase)
        gx += amp * k * math.cos(ang) * np.cos(phase)
        gy += amp * k * math.sin(ang) * np.cos(phase)

    hemi = spec.get("hemisphere")
    if hemi:
        rad = float(hemi["radius_px"]) * pitch
        dx = xu - float(hemi["x"]) * pitch
        dy = yu - float(hemi["y"]) * pitch
        r2 = dx * dx + dy * dy
        zs = np.sqrt(np.clip(rad * rad - r2, 0.0, None))
        z += zs
        # slopes are cut at the outermost 0.5% of the radius to keep nz > 0
        inside = r2 < (0.995 * rad) ** 2
        safe = np.where(inside, zs, 1.0)
        gx += np.where(inside, -dx / safe, 0.0)
        gy += np.where(inside, -dy / safe, 0.0)

    planted = []
    for i, p in enumerate(spec.get("protrusions", [])):
        shape = p.get("shape", "dome")
        if shape not in SHAPES:
            raise InputError(f"protrusion {i}: unknown shape {shape!r}")
        px, py = float(p["x"]), float(p["y"])
        width = float(p["width_um"])
        if not (0 <= px < w and 0 <= py < h):
            raise InputError(f"protrusion {i}: placement ({px}, {py}) outside grid")
        if width < 2 * pitch:
            raise InputError(f"protrusion {i}: width {width} um below two pixels")
        region = int(labels[int(round(py)), int(round(px))]) if labels is not None else 0
        planted.append(Protrusion(i, px, py, width, float(p["height_um"]), shape,
                                  float(p.get("albedo_gain", 0.3)), region))
    if not spec.get("allow_overlap", False):
        for a in planted:
            for b in planted:
                if a.id < b.id:
                    gap = math.hypot(a.x - b.x, a.y - b.y) * pitch
                    if gap < 0.5 * (a.width_um + b.width_um):
                        raise InputError(f"protrusions {a.id} and {b.id} overlap")

    for p in planted:
        radius = 0.5 * p.width_um
        dz, dgx, dgy = _dome(xu - p.x * pitch, yu - p.y * pitch, radius, p.height_um, p.shape)
        z += dz
        gx += dgx
        gy += dgy
        inside = (xu - p.x * pitch) ** 2 + (yu - p.y * pitch) ** 2 < radius**2
        albedo[inside] *= 1.0 + p.albedo_gain
        if color is not None:
            color[inside] *= 1.0 + p.albedo_gain

    return SyntheticScene(z, gx, gy, albedo, planted, pitch, labels, names, color)


def light_position(scene: SyntheticScene, azimuth_deg, elevation_deg, distance_um) -> np.ndarray:
    """Point-light position (µm) at the given direction/distance from the centre."""
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    d = np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    return scene.center_um() + distance_um * d


def render(scene: SyntheticScene, light_um, exposure: float = 1.0, noise: float = 0.0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Lambertian shading under a point light with inverse-square falloff.

    ``noise`` is the standard deviation of additive Gaussian noise as a
    fraction of the noiseless image mean.
    """
    light = np.asarray(light_um, float)
    if light[2] <= scene.height_um.max():
        raise InputError("light at or below surface")
    h, w = scene.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    lx = light[0] - cols * scene.pitch_um
    ly = light[1] - rows * scene.pitch_um
    lz = light[2] - scene.height_um
    r2 = lx * lx + ly * ly + lz * lz
    r = np.sqrt(r2)
    gx, gy = scene.grad_x, scene.grad_y
    cos_inc = (-gx * lx - gy * ly + lz) / (r * np.sqrt(1.0 + gx * gx + gy * gy))
    img = exposure * scene.albedo * np.maximum(cos_inc, 0.0) / r2
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img + rng.normal(0.0, noise * img.mean(), img.shape)
        img = np.maximum(img, 0.0)
    return img


def light_rig(spec: dict) -> list[dict]:
    """Expand ``lights`` from a scene spec into azimuth/elevation/distance dicts.

    Either an explicit list or ``{"count", "elevation_deg", "distance_mm",
    "start_deg"}`` for evenly spaced azimuths.
    """
    lights = spec.get("lights", {"count": 12, "elevation_deg": 45.0, "distance_mm": 40.0})
    if isinstance(lights, dict):
        n = int(lights.get("count", 12))
        start = float(lights.get("start_deg", 0.0))
        elev = lights.get("elevation_deg", 45.0)
        elevs = elev if isinstance(elev, list) else [elev] * n
        return [
            {"azimuth_deg": (start + 360.0 * i / n) % 360.0, "elevation_deg": float(elevs[i % len(elevs)]),
             "distance_mm": float(lights.get("distance_mm", 40.0))}
            for i in range(n)
        ]
    return [dict(light) for light in lights]


def write_synthetic(spec: dict, out_dir, seed: int = 0) -> dict:
    """Render a scene spec into a manifest, 16-bit TIFF stack and ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(spec)
    rig = light_rig(spec)
    noise = float(spec.get("noise", 0.0))
    rng = np.random.default_rng(seed)

    positions = []
    raw = []
    for light in rig:
        dist_um = light["distance_mm"] * 1000.0
        pos = light_position(scene, light["azimuth_deg"], light["elevation_deg"], dist_um)
        positions.append(pos)
        raw.append(render(scene, pos, exposure=dist_um**2, noise=noise, rng=rng))
    peak = max(im.max() for im in raw)
    scale = float(spec.get("exposure_scale", 0.9 / peak if peak > 0 else 1.0))

    names = []
    for i, im in enumerate(raw):
        name = f"light_{i:02d}.tif"
        write_tiff16(out / name, im * scale)
        names.append(name)
    manifest = {"images": names, "pixel_pitch_um": scene.pitch_um}
    if scene.color is not None:
        write_tiff16(out / "color_reference.tif", np.clip(scene.color, 0.0, 1.0))
        manifest["color_reference"] = "color_reference.tif"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    if scene.regions is not None:
        write_png8(out / "regions.png", scene.regions.astype(np.uint8))
    write_png8(out / "manual_mask.png", (scene.footprint_mask() * 255).astype(np.uint8))

    truth = {
        "pixel_pitch_um": scene.pitch_um,
        "shape": list(scene.shape),
        "region_names": scene.region_names,
        "protrusions": [p.to_json() for p in scene.protrusions],
        "lights": [
            {**light, "position_um": [float(v) for v in pos],
             "direction": [float(v) for v in (pos - scene.center_um()) / np.linalg.norm(pos - scene.center_um())]}
            for light, pos in zip(rig, positions)
        ],
        "exposure_scale": scale,
        "seed": seed,
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return truth
