"""Light direction estimation from intensity drop-off, and flat-fielding.

Every image is fitted with a low-order 2D Legendre surface. The azimuth of
its light is the direction of maximum drop-off (polar spokes through the
fit), the elevation is seeded from the magnitude of the drop-off under a
point-light model and then refined jointly with the per-pixel normals.

Coordinates: x runs along columns, y along rows (downwards), z towards the
camera. Azimuths are measured from +x towards +y.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import optimize

from .errors import InputError, NumericalError
from .raster import ImageStack

log = logging.getLogger(__name__)

DARK_FRACTION = 0.02
FLAT_EPSILON = 1e-4
N_SPOKES = 360
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PolySurface:
    """Legendre surface ``sum c[i, j] P_i(y) P_j(x)`` on normalised coordinates.

    ``coefficients`` are already divided by ``mean_value`` so the surface
    averages to 1 over the grid it was fitted on.
    """

    degree: int
    coefficients: np.ndarray
    mean_value: float
    shape: tuple[int, int]

    def __call__(self, x, y):
        return legendre.legval2d(y, x, self.coefficients)

    def grid(self, shape=None) -> np.ndarray:
        h, w = shape or self.shape
        vy = legendre.legvander(np.linspace(-1.0, 1.0, h), self.degree)
        vx = legendre.legvander(np.linspace(-1.0, 1.0, w), self.degree)
        return vy @ self.coefficients @ vx.T

    def at_pixels(self, col, row):
        """Evaluate at (fractional) pixel coordinates of the fitted grid."""
        h, w = self.shape
        x = 2.0 * np.asarray(col, float) / max(w - 1, 1) - 1.0
        y = 2.0 * np.asarray(row, float) / max(h - 1, 1) - 1.0
        return self(x, y)


@dataclass
class LightSet:
    directions: np.ndarray  # (n, 3) unit vectors
    fits: list = field(default_factory=list)
    residual: float = 0.0
    cost_history: list = field(default_factory=list)
    converged: bool = True
    warning: str | None = None

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        if self.directions.ndim != 2 or self.directions.shape[1] != 3:
            raise InputError("light directions must have shape (n, 3)")

    @property
    def n(self) -> int:
        return len(self.directions)

    @property
    def azimuth_deg(self) -> np.ndarray:
        d = self.directions
        return np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 360.0

    @property
    def elevation_deg(self) -> np.ndarray:
        d = self.directions
        return np.degrees(np.arctan2(d[:, 2], np.hypot(d[:, 0], d[:, 1])))

    def to_json(self) -> dict:
        return {
            "lights": [
                {
                    "azimuth_deg": round(float(a), 9),
                    "elevation_deg": round(float(e), 9),
                    "direction": [round(float(v), 12) for v in d],
                }
                for a, e, d in zip(self.azimuth_deg, self.elevation_deg, self.directions)
            ],
            "residual": float(self.residual),
            "converged": self.converged,
            "warning": self.warning,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LightSet":
        try:
            dirs = [light["direction"] for light in obj["lights"]]
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed lights file: {exc}") from exc
        return cls(np.array(dirs, float), residual=float(obj.get("residual", 0.0)))


def direction(azimuth_deg, elevation_deg) -> np.ndarray:
    a = np.radians(azimuth_deg)
    e = np.radians(elevation_deg)
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)


def dark_mask(image: np.ndarray, fraction: float = DARK_FRACTION) -> np.ndarray:
    """True where a pixel is bright enough to enter calibration sums."""
    return image >= fraction * np.median(image)


def fit_polynomial_surface(image: np.ndarray, degree: int = 2, mask=None,
                           clip: float | None = None, clip_iter: int = 5) -> PolySurface:
    """Least-squares Legendre fit, normalised to unit grid mean.

    With ``clip`` set, the fit is repeated ``clip_iter`` times excluding
    pixels whose residual exceeds ``clip`` robust standard deviations, so
    surface relief does not leak into the illumination model.
    """
    if not 1 <= degree <= 4:
        raise InputError(f"degree must be in [1, 4], got {degree}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    nb = degree + 1
    if h * w < nb * nb or h < nb or w < nb:
        raise InputError(f"image {h}x{w} too small for degree {degree}")
    if mask is None:
        mask = dark_mask(image)
    vy = legendre.legvander(np.linspace(-1.0, 1.0, h), degree)
    vx = legendre.legvander(np.linspace(-1.0, 1.0, w), degree)
    coeffs = _masked_fit(image, mask, vy, vx)
    if clip is not None:
        for _ in range(clip_iter):
            resid = image - vy @ coeffs @ vx.T
            dev = np.abs(resid - np.median(resid[mask]))
            sigma = 1.4826 * np.median(dev[mask])
            keep = mask & (dev <= clip * sigma) if sigma > 0 else mask
            if keep.sum() < nb * nb:
                break
            coeffs = _masked_fit(image, keep, vy, vx)
    mean_value = float((vy.mean(axis=0) @ coeffs @ vx.mean(axis=0)))
    scale = max(float(np.abs(image[mask]).max(initial=0.0)), 1e-300)
    if not np.isfinite(mean_value) or mean_value <= 1e-12 * scale or np.all(image == 0):
        raise NumericalError("degenerate fit")
    return PolySurface(degree, coeffs / mean_value, mean_value, (h, w))


def _masked_fit(image, mask, vy, vx):
    h, w = image.shape
    nb = vy.shape[1]
    m = mask.astype(np.float64)
    # masked normal equations without forming the (h*w, nb*nb) design matrix
    vxx = (vx[:, :, None] * vx[:, None, :]).reshape(w, nb * nb)
    vyy = (vy[:, :, None] * vy[:, None, :]).reshape(h, nb * nb)
    t = m @ vxx  # (h, nb*nb) over (j, l)
    gram = np.einsum("ya,yb->ab", vyy, t).reshape(nb, nb, nb, nb)  # (i,k,j,l)
    gram = gram.transpose(0, 2, 1, 3).reshape(nb * nb, nb * nb)  # (i,j),(k,l)
    rhs = (vy.T @ (m * image) @ vx).reshape(nb * nb)

    s = np.linalg.svd(gram, compute_uv=False)
    if s[0] <= 0 or s[-1] < 1e-12 * s[0]:
        raise NumericalError("degenerate fit")
    return np.linalg.solve(gram, rhs).reshape(nb, nb)


def _spoke_samples(fit: PolySurface, n_spokes: int, n_radii: int = 64):
    h, w = fit.shape
    rmax = 0.5 * (min(h, w) - 1)
    theta = np.arange(n_spokes) * (2.0 * np.pi / n_spokes)
    r = (np.arange(n_radii) + 0.5) / n_radii * rmax
    cx, cy = 0.5 * (w - 1), 0.5 * (h - 1)
    col = cx + r[None, :] * np.cos(theta)[:, None]
    row = cy + r[None, :] * np.sin(theta)[:, None]
    return fit.at_pixels(col, row).mean(axis=1)


def estimate_azimuth(fit: PolySurface, n_spokes: int = N_SPOKES, tol: float = 1e-7) -> float:
    """Angle (degrees, [0, 360)) of the brightest radial spoke of ``fit``.

    Spokes are sampled in pixel space so non-square images are not skewed.
    The discrete peak is refined with a parabola through its neighbours.
    """
    means = _spoke_samples(fit, n_spokes)
    spread = means.max() - means.min()
    if spread < tol * max(abs(means.mean()), 1e-300):
        raise NumericalError("azimuth undefined")
    k = int(np.argmax(means))
    f0, fm, fp = means[k], means[k - 1], means[(k + 1) % n_spokes]
    denom = fm - 2.0 * f0 + fp
    delta = 0.5 * (fm - fp) / denom if denom < 0 else 0.0
    step = 360.0 / n_spokes
    return float(((k + delta) * step) % 360.0)


def flat_field(image: np.ndarray, fit: PolySurface, eps: float = FLAT_EPSILON) -> np.ndarray:
    """Divide by the normalised drop-off surface, keeping the grid mean."""
    surf = fit.grid(image.shape)
    if surf.min() <= eps:
        raise NumericalError("non-positive illumination model")
    out = image / surf
    m_out = out.mean()
    if m_out != 0:
        out *= image.mean() / m_out
    return out


def _dropoff_model(xp, yp, azimuth_deg, elevation_deg, distance):
    # flat Lambertian plane lit by a point source `distance` px from the centre
    lx, ly, lz = distance * direction(azimuth_deg, elevation_deg)
    rho2 = (lx - xp) ** 2 + (ly - yp) ** 2 + lz * lz
    return lz / rho2**1.5


def estimate_elevation(fit: PolySurface, azimuth_deg: float, n: int = 33):
    """Elevation (deg) and distance (px) explaining the drop-off of ``fit``.

    A flat surface under a point light at unit-sphere elevation ``e`` and
    distance ``D`` has a falloff whose slope scales with cos(e)/D and whose
    curvature scales with 1/D^2; both are matched against ``fit`` after
    projecting the model onto the same polynomial basis.
    """
    h, w = fit.shape
    xs = np.linspace(-1.0, 1.0, n)
    yn, xn = np.meshgrid(xs, xs, indexing="ij")
    xp = xn * 0.5 * (w - 1)
    yp = yn * 0.5 * (h - 1)
    target = fit(xn, yn)
    target = target / target.mean()
    vander = legendre.legvander2d(yn.ravel(), xn.ravel(), [fit.degree, fit.degree])
    pinv = np.linalg.pinv(vander)

    def residual(params):
        e, logd = params
        model = _dropoff_model(xp, yp, azimuth_deg, e, math.exp(logd)).ravel()
        proj = vander @ (pinv @ model)
        return proj / proj.mean() - target.ravel()

    half = 0.5 * math.hypot(h - 1, w - 1)
    lo = (1.0, math.log(0.75 * half))
    hi = (89.0, math.log(1e4 * half))
    best = None
    for e0 in (20.0, 45.0, 70.0):
        for d0 in (1.5, 4.0, 15.0, 100.0):
            x0 = (e0, math.log(d0 * half))
            res = optimize.least_squares(residual, x0, bounds=(lo, hi), x_scale=(10.0, 1.0))
            if best is None or res.cost < best.cost:
                best = res
    e, logd = best.x
    return float(e), float(math.exp(logd))


def _golden_min(f, a, b, tol=1e-4):
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def check_light_geometry(azimuths_deg) -> None:
    a = np.radians(np.asarray(azimuths_deg, float))
    plane = np.stack([np.cos(a), np.sin(a)], axis=1)
    if len(a) < 3:
        raise NumericalError("degenerate light geometry")
    s = np.linalg.svd(plane, compute_uv=False)
    if s[-1] < 1e-6 * s[0]:
        raise NumericalError("degenerate light geometry")


def solve_normals_masked(intensity: np.ndarray, lights: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel least squares using only each pixel's valid observations.

    ``intensity`` and ``valid`` are (n, P); returns (P, 3) scaled normals.
    Pixels with fewer than three usable lights get zeros.
    """
    n, npix = intensity.shape
    weights = (1 << np.arange(n, dtype=np.int64))
    codes = weights @ valid.astype(np.int64)
    out = np.zeros((npix, 3))
    uniq, inverse = np.unique(codes, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    for u, code in enumerate(uniq):
        sel = (int(code) >> np.arange(n)) & 1 == 1
        if sel.sum() < 3:
            continue
        sub = lights[sel]
        s = np.linalg.svd(sub, compute_uv=False)
        if s[-1] < 1e-8 * s[0]:
            continue
        pix = order[bounds[u]:bounds[u + 1]]
        out[pix] = (np.linalg.pinv(sub) @ intensity[np.ix_(sel, pix)]).T
    return out


class _Cost:
    """Per-light quadratic form of the reprojection cost for fixed normals."""

    def __init__(self, intensity, valid, normals):
        vi = np.where(valid, intensity, 0.0)
        self.a = np.einsum("ip,ip->i", vi, vi)
        self.b = vi @ normals  # (n, 3)
        outer = (normals[:, :, None] * normals[:, None, :]).reshape(-1, 9)
        self.m = (valid.astype(np.float64) @ outer).reshape(-1, 3, 3)

    def light(self, i, vec):
        return self.a[i] - 2.0 * vec @ self.b[i] + vec @ self.m[i] @ vec

    def total(self, dirs):
        return float(sum(self.light(i, d) for i, d in enumerate(dirs)))


def refine_light_positions(
    stack: ImageStack,
    azimuths,
    elevations=None,
    *,
    window_deg: float = 15.0,
    rel_tol: float = 1e-5,
    max_iter: int = 50,
    dark_fraction: float = DARK_FRACTION,
    fits=None,
) -> LightSet:
    """Alternate per-pixel normal solves with per-light elevation searches.

    Each light keeps its azimuth; its elevation is searched by golden
    section within ``window_deg`` of the starting value (the drop-off
    estimate), clipped to (0, 90). A candidate is only accepted when it does
    not raise that light's cost, so the total never increases.
    """
    azimuths = np.asarray(azimuths, float)
    if len(azimuths) != stack.n:
        raise InputError(f"{len(azimuths)} azimuths for {stack.n} images")
    check_light_geometry(azimuths)
    elev = np.full(stack.n, 45.0) if elevations is None else np.asarray(elevations, float).copy()
    lo = np.clip(elev - window_deg, 0.5, 89.9)
    hi = np.clip(elev + window_deg, 0.5, 89.9)

    intensity = stack.as_array().reshape(stack.n, -1)
    valid = np.stack([dark_mask(im, dark_fraction).ravel() for im in stack.images])

    dirs = direction(azimuths, elev)
    normals = solve_normals_masked(intensity, dirs, valid)
    cost = _Cost(intensity, valid, normals)
    current = cost.total(dirs)
    history = [current]
    best = (current, elev.copy())
    rising = 0
    converged = False
    warning = None
    for _ in range(max_iter):
        for i in range(stack.n):
            f = lambda e, i=i: cost.light(i, direction(azimuths[i], e))
            e_new, c_new = _golden_min(f, lo[i], hi[i])
            if c_new <= f(elev[i]):
                elev[i] = e_new
        dirs = direction(azimuths, elev)
        normals = solve_normals_masked(intensity, dirs, valid)
        cost = _Cost(intensity, valid, normals)
        new = cost.total(dirs)
        history.append(new)
        if new < best[0]:
            best = (new, elev.copy())
            rising = 0
        else:
            rising += 1
            if rising >= 3:
                warning = "cost did not decrease for 3 iterations"
                log.warning(warning)
                break
        change = abs(current - new) / max(abs(current), 1e-300)
        current = new
        if change < rel_tol:
            converged = True
            break
    final_cost, elev = best
    return LightSet(
        direction(azimuths, elev),
        fits=list(fits) if fits is not None else [],
        residual=max(float(final_cost), 0.0),
        cost_history=history,
        converged=converged,
        warning=warning,
    )


@dataclass
class Calibration:
    lights: LightSet
    flat_stack: ImageStack
    initial_elevations: np.ndarray
    distances_px: np.ndarray


def calibrate(stack: ImageStack, degree: int = 2, *, elevations=None, window_deg: float = 15.0,
              clip: float | None = 3.0, executor=None) -> Calibration:
    """Fit, estimate azimuths and elevations, flat-field and refine."""
    mapper = executor.map if executor is not None else map

    def per_light(img):
        fit = fit_polynomial_surface(img, degree, clip=clip)
        az = estimate_azimuth(fit)
        e, d = estimate_elevation(fit, az)
        return fit, az, e, d, flat_field(img, fit)

    results = list(mapper(per_light, stack.images))
    fits = [r[0] for r in results]
    az = np.array([r[1] for r in results])
    est = np.array([r[2] for r in results])
    dist = np.array([r[3] for r in results])
    flat = stack.with_images([r[4] for r in results])
    start = est if elevations is None else np.broadcast_to(np.asarray(elevations, float), az.shape)
    lights = refine_light_positions(flat, az, start, window_deg=window_deg, fits=fits)
    return Calibration(lights, flat, est, dist)
