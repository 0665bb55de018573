import json

import numpy as np
import pytest

from paintps import synth
from paintps.raster import ImageStack, write_tiff16


def flat_stack(shape=(64, 64), albedo=0.8, azimuths=(0, 90, 180, 270), elevation=45.0, pitch=15.0):
    """Far-light renders of a flat plane: I = k * L_z for every light."""
    from paintps.calibration import direction

    dirs = direction(np.asarray(azimuths, float), np.full(len(azimuths), elevation))
    images = tuple(np.full(shape, albedo * d[2]) for d in dirs)
    return ImageStack(images, pitch), dirs


def write_manifest(tmp_path, images, pitch=15.0, **extra):
    names = []
    for i, im in enumerate(images):
        names.append(f"img_{i:02d}.tif")
        write_tiff16(tmp_path / names[-1], im)
    doc = {"images": names, "pixel_pitch_um": pitch, **extra}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def far_render(scene: synth.SyntheticScene, dirs):
    """Distant-light Lambertian renders (no falloff), the exact PS model."""
    n = scene.normals()
    out = []
    for d in dirs:
        out.append(scene.albedo * np.maximum(n @ np.asarray(d, float), 0.0))
    return out


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one acceptance line; the terminal summary prints them all."""

    def _record(criterion: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
