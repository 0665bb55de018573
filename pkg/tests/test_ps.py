import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paintps import synth
from paintps.calibration import direction
from paintps.errors import NumericalError
from paintps.ps import AlbedoMap, colorize_albedo, reprojection_rmse, solve_ps
from paintps.raster import ImageStack, to_luminance

from conftest import far_render, flat_stack


def angular_error_deg(a, b):
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def bumpy_scene(**extra):
    spec = {"width": 80, "height": 80, "pitch_um": 15, "albedo": 0.7,
            "protrusions": [{"x": 25, "y": 30, "width_um": 450, "height_um": 40},
                            {"x": 55, "y": 50, "width_um": 600, "height_um": 50, "shape": "caldera"}]}
    spec.update(extra)
    return synth.make_scene(spec)


def test_flat_plane_four_lights():
    stack, dirs = flat_stack(albedo=0.8)
    normals, albedo = solve_ps(stack, dirs)
    assert normals.valid.all()
    np.testing.assert_allclose(normals.normals, np.broadcast_to([0, 0, 1.0], normals.normals.shape),
                               atol=1e-9)
    np.testing.assert_allclose(albedo.k, 0.8, atol=1e-6)


def test_far_light_hemisphere_oracle():
    scene = synth.make_scene({"width": 128, "height": 128, "pitch_um": 15, "albedo": 0.6,
                              "hemisphere": {"x": 64, "y": 64, "radius_px": 40}})
    dirs = direction(np.arange(12) * 30.0, np.full(12, 45.0))
    normals, albedo = solve_ps(ImageStack(tuple(far_render(scene, dirs)), 15.0), dirs)
    err = angular_error_deg(normals.normals, scene.normals())
    assert np.median(err) < 2.0
    yy, xx = np.mgrid[0:128, 0:128]
    interior = (xx - 64) ** 2 + (yy - 64) ** 2 < 20 ** 2  # every light unshadowed here
    assert np.all(np.abs(albedo.k[interior] / 0.6 - 1.0) < 0.02)


def test_scaling_the_stack_scales_albedo_only():
    scene = bumpy_scene()
    dirs = direction(np.arange(6) * 60.0 + 10, np.full(6, 50.0))
    stack = ImageStack(tuple(far_render(scene, dirs)), 15.0)
    n1, k1 = solve_ps(stack, dirs)
    n2, k2 = solve_ps(stack.with_images([2.0 * im for im in stack.images]), dirs)
    np.testing.assert_allclose(k2.k, 2.0 * k1.k, rtol=1e-12)
    np.testing.assert_allclose(n2.normals, n1.normals, atol=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(6)))
def test_permutation_invariance(perm):
    scene = bumpy_scene()
    dirs = direction(np.arange(6) * 60.0, np.full(6, 40.0))
    images = far_render(scene, dirs)
    n1, k1 = solve_ps(ImageStack(tuple(images), 15.0), dirs)
    n2, k2 = solve_ps(ImageStack(tuple(images[i] for i in perm), 15.0), dirs[list(perm)])
    np.testing.assert_allclose(n2.normals, n1.normals, atol=1e-9)
    np.testing.assert_allclose(k2.k, k1.k, atol=1e-12)


def test_reprojection_under_one_percent():
    scene = bumpy_scene()
    dirs = direction(np.arange(12) * 30.0, np.full(12, 55.0))
    stack = ImageStack(tuple(far_render(scene, dirs)), 15.0)
    normals, albedo = solve_ps(stack, dirs)
    assert reprojection_rmse(stack, dirs, normals, albedo) < 0.01 * stack.as_array().mean()


def test_unit_normals_and_positive_nz():
    scene = bumpy_scene()
    dirs = direction(np.arange(5) * 72.0, np.full(5, 45.0))
    normals, albedo = solve_ps(ImageStack(tuple(far_render(scene, dirs)), 15.0), dirs)
    n = normals.normals[normals.valid]
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    assert np.all(n[:, 2] > 0)
    assert np.all(albedo.k >= 0) and np.all(np.isfinite(albedo.k))


def test_dark_pixels_are_invalid():
    stack, dirs = flat_stack(shape=(8, 8))
    images = [im.copy() for im in stack.images]
    for im in images:
        im[2, 3] = 0.0
    normals, albedo = solve_ps(stack.with_images(images), dirs)
    assert not normals.valid[2, 3]
    assert normals.valid.sum() == 63
    np.testing.assert_array_equal(normals.normals[2, 3], [0, 0, 1])
    assert albedo.k[2, 3] == 0


def test_coplanar_lights_are_degenerate():
    stack, _ = flat_stack(azimuths=(0, 120, 240))
    dirs = direction(np.array([0.0, 120.0, 240.0]), np.zeros(3))  # all in the image plane
    with pytest.raises(NumericalError, match="degenerate light geometry"):
        solve_ps(stack, dirs)


def test_gray_reference_gives_equal_channels():
    k = np.linspace(0, 1, 12).reshape(3, 4)
    out = colorize_albedo(AlbedoMap(k), np.full((3, 4, 3), 0.3))
    for c in range(3):
        np.testing.assert_array_equal(out.color[..., c], k)


def test_black_reference_pixel_gives_zero():
    ref = np.full((2, 2, 3), 0.5)
    ref[0, 0] = 0
    out = colorize_albedo(AlbedoMap(np.ones((2, 2))), ref)
    np.testing.assert_array_equal(out.color[0, 0], 0)


def test_missing_reference_passes_through():
    k = np.ones((2, 2))
    out = colorize_albedo(AlbedoMap(k), None)
    assert out.color is None and out.k is k


def test_coloured_bump_keeps_hue_and_luminance():
    scene = synth.make_scene({
        "width": 64, "height": 64, "pitch_um": 15,
        "regions": [{"name": "red", "box": [0, 0, 32, 64], "albedo": 0.5, "color": [0.9, 0.3, 0.2]},
                    {"name": "blue", "box": [32, 0, 64, 64], "albedo": 0.5, "color": [0.2, 0.3, 0.9]}],
        "protrusions": [{"x": 32, "y": 32, "width_um": 400, "height_um": 40}],
    })
    dirs = direction(np.arange(8) * 45.0, np.full(8, 50.0))
    _, albedo = solve_ps(ImageStack(tuple(far_render(scene, dirs)), 15.0), dirs)
    out = colorize_albedo(albedo, scene.color)
    np.testing.assert_allclose(to_luminance(out.color), albedo.k, rtol=0.01)
    chroma_in = scene.color / scene.color.sum(axis=-1, keepdims=True)
    chroma_out = out.color / out.color.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(chroma_out, chroma_in, atol=1e-9)
