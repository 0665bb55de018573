"""End-to-end acceptance suite, one test per criterion.

Every scene is built by the synthetic oracle; nothing here reads real
capture data. Each test logs a PASS/FAIL line (shown in the terminal
summary) before asserting.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import tifffile

from paintps import cli, detection, pipeline, stats, synth
from paintps.calibration import calibrate, estimate_azimuth, fit_polynomial_surface
from paintps.integration import GradientField, differentiate, integrate_frankot_chellappa
from paintps.ps import solve_ps
from paintps.raster import ImageStack, RegionPartition

from test_integration import fwhm_px, periodic_surface

PITCH = 15.0
RIG_MM = 40.0  # default synthetic rig distance


def angle_diff(a, b):
    return abs((a - b + 180.0) % 360.0 - 180.0)


def run_pipeline(spec, root: Path, manual=False, **cfg):
    truth = synth.write_synthetic(spec, root / "data")
    config = pipeline.RunConfig(
        manifest=str(root / "data" / "manifest.json"), regions=str(root / "data" / "regions.png"),
        manual=str(root / "data" / "manual_mask.png") if manual else None, out=str(root / "out"), **cfg)
    pipeline.run(config)
    return truth, root / "out"


def whole_region(n):
    return [{"name": "all", "box": [0, 0, n, n]}]


# ---------------------------------------------------------------------------

def test_criterion_1_azimuth_recovery(record):
    n = 1024
    scene = synth.make_scene({"width": n, "height": n, "pitch_um": PITCH})
    azimuths = np.arange(24) * 15.0
    images = [synth.render(scene, synth.light_position(scene, a, 45.0, RIG_MM * 1000)) for a in azimuths]
    t0 = time.perf_counter()
    est = [estimate_azimuth(fit_polynomial_surface(im)) for im in images]
    elapsed = time.perf_counter() - t0
    worst = max(angle_diff(e, a) for e, a in zip(est, azimuths))
    ok = worst <= 1.0 and elapsed < 5.0
    record("1", ok, f"24 azimuths at 1024^2, max error {worst:.3f} deg (<= 1), fit+estimate {elapsed:.2f} s (< 5)")
    assert ok


def test_criterion_2_light_refinement(record):
    n = 1024
    scene = synth.make_scene({"width": n, "height": n, "pitch_um": PITCH,
                              "hemisphere": {"x": n / 2, "y": n / 2, "radius_px": 160}})
    az = np.arange(12) * 30.0
    images = [synth.render(scene, synth.light_position(scene, a, 45.0, RIG_MM * 1000)) for a in az]
    stack = ImageStack(tuple(images), PITCH)
    t0 = time.perf_counter()
    cal = calibrate(stack)
    elapsed = time.perf_counter() - t0
    err = np.abs(cal.lights.elevation_deg - 45.0)
    hist = np.array(cal.lights.cost_history)
    monotone = bool(np.all(np.diff(hist) <= 0.0))
    ok = err.max() < 3.0 and monotone and elapsed < 60.0
    record("2", ok, f"12-light hemisphere at 1024^2, max elevation error {err.max():.2f} deg (< 3), "
                    f"cost non-increasing over {len(hist) - 1} iterations: {monotone}, {elapsed:.1f} s (< 60)")
    assert ok


def _sphere_errors(noise):
    n, radius = 512, 40
    scene = synth.make_scene({"width": n, "height": n, "pitch_um": PITCH, "albedo": 0.6,
                              "hemisphere": {"x": n / 2, "y": n / 2, "radius_px": radius}})
    az = np.arange(12) * 30.0
    rng = np.random.default_rng(7)
    d = RIG_MM * 1000
    images = [synth.render(scene, synth.light_position(scene, a, 45.0, d), exposure=d * d,
                           noise=noise, rng=rng) for a in az]
    cal = calibrate(ImageStack(tuple(images), PITCH))
    normals, albedo = solve_ps(cal.flat_stack, cal.lights)
    yy, xx = np.mgrid[0:n, 0:n]
    r = np.hypot(xx - n / 2, yy - n / 2)
    sphere = r < radius
    cos = np.clip(np.sum(normals.normals * scene.normals(), axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))[sphere]
    # the absolute albedo scale is unobservable; take it from the flat surround
    gain = np.median(albedo.k[r > radius + 5]) / 0.6
    interior = r < 0.6 * radius  # lit by all twelve lights
    alb = np.abs(albedo.k[interior] / gain / 0.6 - 1.0)
    return float(np.median(ang)), float(alb.max())


def test_criterion_3_ps_accuracy(record):
    med_clean, alb_clean = _sphere_errors(0.0)
    med_noisy, _ = _sphere_errors(0.01)
    ok = med_clean < 2.0 and alb_clean < 0.02 and med_noisy < 5.0
    record("3", ok, f"oracle sphere median angular error {med_clean:.2f} deg (< 2), max albedo error "
                    f"{100 * alb_clean:.2f}% (< 2%), 1% noise median {med_noisy:.2f} deg (< 5)")
    assert ok


def test_criterion_4_integration(record, tmp_path):
    z, g = periodic_surface(128, 160, amp=2.5)
    rec = integrate_frankot_chellappa(g, 1.0, padding="none")
    rmse = float(np.sqrt(np.mean((rec - (z - z.mean())) ** 2))) / 2.5

    rng = np.random.default_rng(3)
    g1 = GradientField(*rng.standard_normal((2, 96, 120)))
    g2 = GradientField(*rng.standard_normal((2, 96, 120)))
    z1 = integrate_frankot_chellappa(g1, PITCH)
    idem = float(np.abs(integrate_frankot_chellappa(differentiate(z1, PITCH), PITCH) - z1).max())
    mix = GradientField(0.7 * g1.p - 1.3 * g2.p, 0.7 * g1.q - 1.3 * g2.q)
    lin = float(np.abs(integrate_frankot_chellappa(mix, PITCH)
                       - (0.7 * z1 - 1.3 * integrate_frankot_chellappa(g2, PITCH))).max())

    spec = {"width": 256, "height": 256, "pitch_um": PITCH, "albedo": 0.6, "regions": whole_region(256),
            "protrusions": [{"x": 128, "y": 128, "width_um": 200, "height_um": 50}],
            "lights": {"count": 12, "elevation_deg": 45, "distance_mm": RIG_MM}}
    _, out = run_pipeline(spec, tmp_path)
    depth = tifffile.imread(out / "depth.tif").astype(np.float64)
    truth = fwhm_px(synth.make_scene(spec).height_um[128])
    dx = abs(fwhm_px(depth[128]) - truth)
    dy = abs(fwhm_px(depth[:, 128]) - truth)

    ok = rmse < 1e-6 and idem < 1e-9 and lin < 1e-9 and max(dx, dy) <= 1.0
    record("4", ok, f"periodic RMSE/amplitude {rmse:.1e} (< 1e-6), idempotence {idem:.1e}, linearity "
                    f"{lin:.1e} (< 1e-9), 200 um bump FWHM off by {max(dx, dy):.2f} px (<= 1)")
    assert ok


def twenty_bump_spec(n=512, seed=11, bumps=20):
    rng = np.random.default_rng(seed)
    planted = []
    while len(planted) < bumps:
        w, h = rng.uniform(100, 400), rng.uniform(20, 80)
        x, y = rng.uniform(30, n - 30, 2)
        if all(math.hypot(x - p["x"], y - p["y"]) * PITCH > (w + p["width_um"]) / 2 + 150 for p in planted):
            planted.append({"x": round(float(x), 2), "y": round(float(y), 2),
                            "width_um": round(float(w), 1), "height_um": round(float(h), 1)})
    return {"width": n, "height": n, "pitch_um": PITCH, "albedo": 0.6, "regions": whole_region(n),
            "texture": {"amplitude_um": 3.0, "wavelength_um": 600.0, "angle_deg": 25.0},
            "protrusions": planted, "lights": {"count": 12, "elevation_deg": 45, "distance_mm": RIG_MM}}


def match(records, planted):
    """Pair each detection with an unused planted bump whose footprint holds its centroid."""
    used, pairs, false_pos = set(), [], 0
    for r in records:
        hit = next((p for p in planted if p["id"] not in used
                    and math.hypot(r.x - p["x"], r.y - p["y"]) * PITCH < p["width_um"] / 2), None)
        if hit is None:
            false_pos += 1
        else:
            used.add(hit["id"])
            pairs.append((r, hit))
    return pairs, false_pos


def test_criterion_5_detection(record, tmp_path):
    spec = twenty_bump_spec()
    widths = [p["width_um"] for p in spec["protrusions"]]
    heights = [p["height_um"] for p in spec["protrusions"]]
    assert 100 <= min(widths) and max(widths) <= 400 and 20 <= min(heights) and max(heights) <= 80
    truth, out = run_pipeline(spec, tmp_path / "bumps")
    pairs, fp_bumps = match(detection.read_csv(out / "protrusions.csv").records, truth["protrusions"])
    bins = [abs(int(r.equivalent_width_um // 100) - int(p["width_um"] // 100)) for r, p in pairs]

    control = dict(spec, protrusions=[])
    _, cout = run_pipeline(control, tmp_path / "control")
    fp_control = len(detection.read_csv(cout / "protrusions.csv"))

    ok = len(pairs) >= 18 and fp_control == 0 and all(b <= 1 for b in bins)
    record("5", ok, f"{len(pairs)}/20 bumps detected (>= 18), {fp_control} false positives on control "
                    f"(= 0), widths within one 100 um bin: {sum(b <= 1 for b in bins)}/{len(bins)}")
    assert ok


def test_criterion_6_statistics(record):
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 5, size=(80, 120)).astype(np.int32)
    part = RegionPartition(labels, tuple("abcd"))
    recs = [detection.ProtrusionRecord(i, 0.0, 0.0, 4, float(w), 0.0, "union", int(r))
            for i, (w, r) in enumerate(zip(rng.uniform(20, 900, 400), rng.integers(0, 5, 400)))]
    conserved = all(sum(s.histogram) == s.count for s in stats.compute_stats(recs, part, PITCH))
    conserved &= all(sum(s.histogram) == s.count
                     for s in stats.compute_stats(recs, part, PITCH, edges=stats.fine_edges(900)))

    # 1 cm^2 at 100 um pitch is 100 x 100 pixels
    one = RegionPartition(np.ones((100, 100), np.int32), ("light",))
    planted = [detection.ProtrusionRecord(i, 0.0, 0.0, 4, 50.0 + 8 * i, 0.0, "manual", 1) for i in range(45)]
    s = stats.compute_stats(planted, one, 100.0)[0]
    ok = conserved and s.count_per_cm2 == 45.0 and 34 <= s.count_per_cm2 <= 57
    record("6", ok, f"histogram mass conserved: {conserved}; 1 cm^2 region reports "
                    f"{s.count_per_cm2:g}/cm^2 (= 45, inside 34-57)")
    assert ok


def four_region_spec(n=512, seed=2):
    rng = np.random.default_rng(seed)
    half = n // 2
    boxes = [[0, 0, half, half], [half, 0, n, half], [0, half, half, n], [half, half, n, n]]
    planted = []
    for count, box in zip((4, 8, 12, 16), boxes):
        placed = []
        while len(placed) < count:
            # two in five are shallow, albedo-neutral bumps the detector cannot see
            faint = len(placed) % 5 in (1, 3)
            w = rng.uniform(100, 250)
            h = rng.uniform(3, 4) if faint else rng.uniform(25, 60)
            x = rng.uniform(box[0] + 20, box[2] - 20)
            y = rng.uniform(box[1] + 20, box[3] - 20)
            if all(math.hypot(x - p["x"], y - p["y"]) * PITCH > (w + p["width_um"]) / 2 + 100 for p in placed):
                placed.append({"x": round(float(x), 2), "y": round(float(y), 2), "width_um": round(float(w), 1),
                               "height_um": round(float(h), 2), "albedo_gain": 0.0 if faint else 0.3})
        planted += placed
    return {"width": n, "height": n, "pitch_um": PITCH, "albedo": 0.6,
            "texture": {"amplitude_um": 3.0, "wavelength_um": 600.0, "angle_deg": 25.0},
            "regions": [{"name": name, "box": box} for name, box in zip("ABCD", boxes)],
            "protrusions": planted, "lights": {"count": 12, "elevation_deg": 45, "distance_mm": RIG_MM}}


def test_criterion_7_method_comparison(record, tmp_path):
    _, out = run_pipeline(four_region_spec(), tmp_path, manual=True)
    doc = json.loads((out / "stats.json").read_text())
    rows = doc["comparison"]["rows"]
    truth = [r["density_a"] for r in rows]
    auto = [r["density_b"] for r in rows]
    rho = doc["comparison"]["rank_correlation"]
    under = all(b < a for a, b in zip(truth, auto))
    ok = len(rows) >= 4 and len(set(truth)) == len(truth) and under and rho is not None and rho >= 0.9
    ratios = ", ".join(f"{r['ratio']:.2f}" for r in rows)
    record("7", ok, f"{len(rows)} regions, automated/truth density ratios [{ratios}], "
                    f"rank correlation {rho} (>= 0.9)")
    assert ok


def test_criterion_8_determinism(record, tmp_path):
    spec = twenty_bump_spec(n=256, bumps=6)
    spec["regions"] = [{"name": "top", "box": [0, 0, 256, 128]}, {"name": "bottom", "box": [0, 128, 256, 256]}]
    (tmp_path / "scene.json").write_text(json.dumps(spec))
    assert cli.main(["synth", str(tmp_path / "scene.json"), "--out", str(tmp_path / "data"), "--seed", "9"]) == 0
    outs = []
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        code = cli.main(["run", "--manifest", str(tmp_path / "data" / "manifest.json"),
                         "--regions", str(tmp_path / "data" / "regions.png"),
                         "--manual", str(tmp_path / "data" / "manual_mask.png"),
                         "--out", str(out), "--threads", str(threads), "--seed", "9"])
        assert code == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".json"))
    differ = [name for name in names
              if any((o / name).read_bytes() != (outs[0] / name).read_bytes() for o in outs[1:])]
    ok = len(names) >= 8 and not differ
    record("8", ok, f"{len(names)} CSV/JSON files byte-identical at 1, 4, 8 threads"
                    + (f"; differing: {differ}" if differ else ""))
    assert ok
