"""2D localized region-based active contour per axial slice.

The zero level set of a signed-distance field (negative inside) evolves
under localized two-phase piecewise-constant statistics computed in an
adaptive window, with the interior/exterior fidelity weights driven by
the contour-position CNN:

    F = lam1*(I-u)^2 - lam2*(I-v)^2 + mu*kappa
    phi <- phi + dt * F * |grad phi|      (dt capped for stability)

lam1 pushes phi up near the contour (contraction), lam2 pulls it down
(expansion); u and v are the local inside/outside means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .cnn import ClassProbs, CnnParams, forward, make_patch
from .errors import ContourVanishedError, ValidationError
from .features import local_homogeneity
from .util import nearest_odd
from .volume import BoxRegion, Mask3, Volume3

LAMBDA_MIN = math.exp(0.5)
LAMBDA_MAX = math.exp(2.0)
WINDOW_MIN = 5
WINDOW_MAX = 41


@dataclass(frozen=True)
class PhiField:
    """Level-set function over a slice ROI, indexed [x, y], negative inside."""

    grid: np.ndarray
    band_width: float = 3.0

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ValidationError("phi grid must be 2D")
        if self.band_width <= 0:
            raise ValidationError("band width must be > 0")
        self.grid.setflags(write=False)

    @property
    def inside(self) -> np.ndarray:
        return self.grid < 0

    def has_zero_level_set(self) -> bool:
        return bool(self.inside.any() and (self.grid >= 0).any())


@dataclass(frozen=True)
class EnergyWeights:
    lam1: float
    lam2: float
    mu: float = 0.0

    def __post_init__(self):
        if self.lam1 <= 0 or self.lam2 <= 0 or self.mu < 0:
            raise ValidationError("energy weights must be positive (mu >= 0)")


@dataclass(frozen=True)
class WindowParams:
    side: int
    texture_factor: float

    def __post_init__(self):
        if self.side % 2 == 0 or not (WINDOW_MIN <= self.side <= WINDOW_MAX):
            raise ValidationError(
                f"window side must be odd in [{WINDOW_MIN}, {WINDOW_MAX}], got {self.side}"
            )
        if not (1.0 <= self.texture_factor <= 2.0):
            raise ValidationError("texture factor must lie in [1, 2]")


def init_phi_from_points(p_a, p_b, shape, band_width: float = 3.0) -> PhiField:
    """Circle through the two diameter endpoints, as an exact signed
    distance field over the given [x, y] grid shape."""
    ax, ay = float(p_a[0]), float(p_a[1])
    bx, by = float(p_b[0]), float(p_b[1])
    if ax == bx and ay == by:
        raise ValidationError("diameter endpoints must be distinct")
    cx, cy = (ax + bx) / 2.0, (ay + by) / 2.0
    radius = math.hypot(bx - ax, by - ay) / 2.0
    xs = np.arange(shape[0], dtype=np.float64)[:, None]
    ys = np.arange(shape[1], dtype=np.float64)[None, :]
    grid = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) - radius
    return PhiField(grid, band_width)


def lambdas_from_probs(p: ClassProbs, mu_factor: float = 0.2) -> EnergyWeights:
    """Fidelity weights from the contour-position probabilities:
    lam1 = exp((1+p2+p3)/(1+p1)), lam2 = exp((1+p1+p2)/(1+p3)).

    Deep inside (p1 high) expansion dominates; far outside (p3 high)
    contraction dominates.  mu defaults to mu_factor times the mean lam.
    """
    total = p.p1 + p.p2 + p.p3
    if abs(total - 1.0) > 1e-6 or min(p.p1, p.p2, p.p3) < -1e-9:
        raise ValidationError(f"probabilities off the simplex: {p}")
    lam1 = math.exp((1.0 + p.p2 + p.p3) / (1.0 + p.p1))
    lam2 = math.exp((1.0 + p.p1 + p.p2) / (1.0 + p.p3))
    return EnergyWeights(lam1, lam2, mu_factor * 0.5 * (lam1 + lam2))


def adaptive_window(diameter: float, homogeneity: float) -> WindowParams:
    """Local-statistics window from contour scale and texture:
    t = 2 - H, side = clamp(nearest odd of 0.4 * D * t, 5, 41)."""
    if diameter < 2:
        raise ValidationError("contour diameter must be >= 2 voxels")
    if not (0.0 < homogeneity <= 1.0):
        raise ValidationError("homogeneity must lie in (0, 1]")
    t = 2.0 - homogeneity
    side = nearest_odd(0.4 * diameter * t)
    side = min(max(side, WINDOW_MIN), WINDOW_MAX)
    return WindowParams(side, t)


def _box_sum_2d(arr: np.ndarray, side: int) -> np.ndarray:
    """Window sums with the window clipped at the image edges."""
    nx, ny = arr.shape
    half = side // 2
    integral = np.zeros((nx + 1, ny + 1), dtype=np.float64)
    integral[1:, 1:] = arr
    np.cumsum(integral, axis=0, out=integral)
    np.cumsum(integral, axis=1, out=integral)
    xs = np.arange(nx)
    ys = np.arange(ny)
    lo_x = np.maximum(xs - half, 0)
    hi_x = np.minimum(xs + half, nx - 1) + 1
    lo_y = np.maximum(ys - half, 0)
    hi_y = np.minimum(ys + half, ny - 1) + 1
    return (
        integral[np.ix_(hi_x, hi_y)]
        - integral[np.ix_(lo_x, hi_y)]
        - integral[np.ix_(hi_x, lo_y)]
        + integral[np.ix_(lo_x, lo_y)]
    )


def _interface_band(grid: np.ndarray, band_width: float) -> np.ndarray:
    """Pixels within band_width (4-connected dilation) of a sign change.

    Anchoring the band to the interface rather than to |phi| keeps the
    update active even when phi drifts from a distance function between
    reinitializations.
    """
    inside = grid < 0
    edge = np.zeros(grid.shape, dtype=bool)
    edge[:-1, :] |= inside[:-1, :] != inside[1:, :]
    edge[1:, :] |= inside[:-1, :] != inside[1:, :]
    edge[:, :-1] |= inside[:, :-1] != inside[:, 1:]
    edge[:, 1:] |= inside[:, :-1] != inside[:, 1:]
    if not edge.any():
        return edge
    return ndimage.binary_dilation(edge, iterations=max(int(band_width), 1))


def _curvature_and_gradmag(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.gradient(phi, axis=0)
    gy = np.gradient(phi, axis=1)
    gxx = np.gradient(gx, axis=0)
    gyy = np.gradient(gy, axis=1)
    gxy = np.gradient(gx, axis=1)
    g2 = gx**2 + gy**2
    kappa = (gxx * gy**2 - 2.0 * gx * gy * gxy + gyy * gx**2) / (
        g2**1.5 + 1e-12
    )
    return kappa, np.sqrt(g2)


def evolve_step(
    phi: PhiField, image: np.ndarray, w: EnergyWeights,
    win: WindowParams, dt: float = 0.45,
) -> PhiField:
    """One explicit narrow-band update of the localized region energy.

    The effective time step is capped so no phi value moves more than
    0.45 voxels per step.
    """
    grid = phi.grid
    img = np.asarray(image, dtype=np.float64)
    if img.shape != grid.shape:
        raise ValidationError("image and phi shapes differ")
    if not phi.has_zero_level_set():
        raise ContourVanishedError("phi has no zero level set")
    band = _interface_band(grid, phi.band_width)
    if not band.any():
        raise ContourVanishedError("empty narrow band")

    inside = (grid < 0).astype(np.float64)
    cnt_in = _box_sum_2d(inside, win.side)
    cnt_out = _box_sum_2d(1.0 - inside, win.side)
    sum_in = _box_sum_2d(img * inside, win.side)
    sum_out = _box_sum_2d(img * (1.0 - inside), win.side)
    mean_in_global = img[grid < 0].mean()
    mean_out_global = img[grid >= 0].mean()
    u = np.where(cnt_in > 0, sum_in / np.maximum(cnt_in, 1.0), mean_in_global)
    v = np.where(cnt_out > 0, sum_out / np.maximum(cnt_out, 1.0), mean_out_global)

    kappa, gmag = _curvature_and_gradmag(grid)
    force = w.lam1 * (img - u) ** 2 - w.lam2 * (img - v) ** 2 + w.mu * kappa
    step = force * gmag
    peak = float(np.abs(step[band]).max())
    dt_eff = min(dt, 0.45 / peak) if peak > 0 else dt

    new = grid.copy()
    new[band] += dt_eff * step[band]
    return PhiField(new, phi.band_width)


def reinitialize(phi: PhiField) -> PhiField:
    """Replace phi by the signed distance to its own zero level set.

    Interface points are located by linear interpolation along grid
    edges, so an exact SDF passes through nearly unchanged and the sign
    (hence the inside region) is preserved everywhere.
    """
    grid = phi.grid
    if not phi.has_zero_level_set():
        raise ContourVanishedError("phi has no zero crossing")
    pts = []
    zx, zy = np.nonzero(grid == 0.0)
    if len(zx):
        pts.append(np.stack([zx.astype(np.float64), zy.astype(np.float64)], axis=1))
    # Crossings on axis edges plus both cell diagonals; the diagonals keep
    # the interface sampling dense where it runs at 45 degrees.
    steps = ((1, 0), (0, 1), (1, 1), (1, -1))
    for dx, dy in steps:
        sx = slice(None, -dx if dx else None)
        sy = slice(None, -1) if dy > 0 else (slice(1, None) if dy < 0 else slice(None))
        a = grid[sx, sy]
        b = grid[dx:, 1:] if dy > 0 else (grid[dx:, :-1] if dy < 0 else grid[dx:, sy])
        sign_change = (a * b) < 0
        i, j = np.nonzero(sign_change)
        if len(i) == 0:
            continue
        theta = a[i, j] / (a[i, j] - b[i, j])
        j0 = j + (1 if dy < 0 else 0)
        pts.append(np.stack([i + theta * dx, j0 + theta * dy], axis=1))
    if not pts:
        raise ContourVanishedError("phi has no zero crossing")
    interface = np.vstack(pts)
    xs, ys = np.meshgrid(
        np.arange(grid.shape[0], dtype=np.float64),
        np.arange(grid.shape[1], dtype=np.float64),
        indexing="ij",
    )
    query = np.stack([xs.ravel(), ys.ravel()], axis=1)
    dist, _ = cKDTree(interface).query(query)
    dist = dist.reshape(grid.shape)
    return PhiField(np.where(grid < 0, -dist, dist), phi.band_width)


# ---------------------------------------------------------------------------
# Per-lesion segmentation loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentConfig:
    max_iters: int = 500
    cnn_every: int = 10
    reinit_every: int = 25
    converge_tol: float = 0.005
    converge_checks: int = 3
    converge_check_every: int = 10
    band_width: float = 3.0
    mu_factor: float = 0.2
    dt: float = 0.45


@dataclass(frozen=True)
class SliceRecord:
    z: int
    iterations: int
    lambda1: float
    lambda2: float
    window_side: int


@dataclass(frozen=True)
class SegmentationResult:
    mask: Mask3
    slices: tuple[SliceRecord, ...]
    warnings: tuple[str, ...]


def _contour_stats(phi_grid):
    inside = phi_grid < 0
    area = int(inside.sum())
    if area == 0:
        raise ContourVanishedError("contour area reached zero")
    coords = np.argwhere(inside)
    centroid = coords.mean(axis=0)
    r_eq = math.sqrt(area / math.pi)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    return area, centroid, r_eq, lo, hi


def _segment_slice(slice_img, p_a, p_b, cnn, cfg):
    """Evolve one slice inside its ROI; returns (inside mask, record)."""
    phi = init_phi_from_points(p_a, p_b, slice_img.shape, cfg.band_width)
    weights = EnergyWeights(1.0, 1.0, 0.2)
    window = WindowParams(WINDOW_MIN, 1.0)
    streak = 0
    snapshot = phi.inside
    outside_far = 0
    iters = 0
    for it in range(cfg.max_iters):
        iters = it + 1
        if it % cfg.cnn_every == 0:
            area, centroid, r_eq, lo, hi = _contour_stats(phi.grid)
            patch = make_patch(slice_img, centroid, max(r_eq, 2.0))
            probs = forward(cnn, patch)
            outside_far = outside_far + 1 if probs.p3 >= 0.9 else 0
            weights = lambdas_from_probs(probs, cfg.mu_factor)
            crop = slice_img[
                max(lo[0] - 2, 0):hi[0] + 3, max(lo[1] - 2, 0):hi[1] + 3
            ]
            homogeneity = max(local_homogeneity(crop), 1e-6)
            window = adaptive_window(max(2.0 * r_eq, 2.0), min(homogeneity, 1.0))
        phi = evolve_step(phi, slice_img, weights, window, cfg.dt)
        if (it + 1) % cfg.reinit_every == 0:
            phi = reinitialize(phi)
        inside = phi.inside
        area = int(inside.sum())
        if area < 4:
            raise ContourVanishedError("contour collapsed")
        # Compare against the state one check window ago: noise-driven
        # contraction advances in bursts, so per-step deltas are too hasty.
        if (it + 1) % cfg.converge_check_every == 0:
            changed = int(np.logical_xor(inside, snapshot).sum())
            snapshot = inside
            if changed < cfg.converge_tol * area:
                streak += 1
                if streak >= cfg.converge_checks:
                    break
            else:
                streak = 0
    if outside_far >= 3:
        # The steering net kept reporting far-outside while the contour
        # stalled: nothing to segment here, treat as collapsed.
        raise ContourVanishedError("persistent outside-far steering")
    record = SliceRecord(
        z=-1,
        iterations=iters,
        lambda1=weights.lam1,
        lambda2=weights.lam2,
        window_side=window.side,
    )
    return phi.inside, record


def segment_lesion(
    v: Volume3, box: BoxRegion, cnn: CnnParams, cfg: SegmentConfig = SegmentConfig()
) -> SegmentationResult:
    """Slice-wise CNN-steered active-contour segmentation within a
    detection box.

    Each axial slice intersecting the box starts from the circle whose
    diameter is the box's in-slice diagonal; the CNN re-steers lam1/lam2
    every cfg.cnn_every iterations and phi is re-distanced every
    cfg.reinit_every.  A slice whose contour vanishes yields an empty
    mask plus a warning entry.
    """
    (x0, y0, z0), (x1, y1, z1) = box.min, box.max
    nx, ny, nz = v.dims
    if not box.within(v.dims):
        raise ValidationError(f"detection box {box.min}..{box.max} outside volume")
    if x0 == x1 and y0 == y1:
        raise ValidationError("degenerate detection box: no in-plane extent")

    radius = 0.5 * math.hypot(x1 - x0, y1 - y0)
    pad = int(math.ceil(0.8 * radius + 6))
    rx0, rx1 = max(x0 - pad, 0), min(x1 + pad, nx - 1)
    ry0, ry1 = max(y0 - pad, 0), min(y1 + pad, ny - 1)

    out = np.zeros(v.dims, dtype=np.uint8)
    records = []
    warns = []
    mid = ((x0 + x1) / 2 - rx0, (y0 + y1) / 2 - ry0)
    half_diag = (0.5 * (x1 - x0), 0.5 * (y1 - y0))
    zc = 0.5 * (z0 + z1)
    half_z = 0.5 * (z1 - z0) + 0.5
    for z in range(z0, z1 + 1):
        # The two points are the lesion diameter, which tapers away from
        # the central slice; modulate the diagonal ellipsoidally so the
        # initial interior stays lesion-dominated on distal slices.
        frac = math.sqrt(max(1.0 - ((z - zc) / half_z) ** 2, 0.0))
        scale = max(frac, min(2.5 / max(radius, 1e-9), 1.0))
        p_a = (mid[0] - scale * half_diag[0], mid[1] - scale * half_diag[1])
        p_b = (mid[0] + scale * half_diag[0], mid[1] + scale * half_diag[1])
        roi = v.data[rx0:rx1 + 1, ry0:ry1 + 1, z].astype(np.float64)
        try:
            inside, rec = _segment_slice(roi, p_a, p_b, cnn, cfg)
            out[rx0:rx1 + 1, ry0:ry1 + 1, z][inside] = 1
            records.append(SliceRecord(z, rec.iterations, rec.lambda1,
                                       rec.lambda2, rec.window_side))
        except ContourVanishedError as e:
            warns.append(f"slice {z}: contour vanished ({e})")
            records.append(SliceRecord(z, 0, float("nan"), float("nan"), 0))
    return SegmentationResult(
        Mask3(out, v.spacing), tuple(records), tuple(warns)
    )
