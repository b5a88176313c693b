"""Feature extraction: 3D Haar-like box features over integral volumes,
GLCM texture statistics, and self-aligned ray features.

Ray feature layout (24 per ray, rays ordered per RAY_DIRECTIONS):
  0      HU at the hit voxel
  1-4    mean / std / min / max HU over the 3x3x3 neighborhood of the hit
  5      gradient magnitude at the hit
  6-7    mean / std gradient magnitude over that neighborhood
  8      cosine between the image gradient at the hit and the ray direction
  9      hit distance in voxels
  10-16  7 HU samples at fractions 1/8 .. 7/8 of the center-to-hit segment
  17-23  7 gradient-magnitude samples at the same points

Profile samples are trilinearly interpolated; hits snap to the nearest
voxel.  Both choices keep the feature vector exactly permutation-
equivariant under axis-aligned 90-degree volume rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import IntegralVolume, Volume3, box_sum_batch

# 6 face directions then the 8 cube diagonals, lexicographic by sign triple.
_AXES = np.array(
    [
        [1, 0, 0], [-1, 0, 0],
        [0, 1, 0], [0, -1, 0],
        [0, 0, 1], [0, 0, -1],
    ],
    dtype=np.float64,
)
_DIAGS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
) / np.sqrt(3.0)
RAY_DIRECTIONS = np.vstack([_AXES, _DIAGS])
RAY_DIRECTIONS.setflags(write=False)

N_RAYS = 14
FEATURES_PER_RAY = 24
RAY_VECTOR_LEN = N_RAYS * FEATURES_PER_RAY


# ---------------------------------------------------------------------------
# Haar-like box features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HaarBox:
    min_off: tuple[int, int, int]
    max_off: tuple[int, int, int]
    weight: int

    def __post_init__(self):
        if self.weight not in (-2, -1, 1, 2):
            raise ValidationError(f"haar weight must be in {{+-1, +-2}}, got {self.weight}")
        if any(a > b for a, b in zip(self.min_off, self.max_off)):
            raise ValidationError("haar box min_off exceeds max_off")


@dataclass(frozen=True)
class HaarSpec:
    boxes: tuple[HaarBox, ...]
    normalize: bool = True

    def __post_init__(self):
        if not self.boxes:
            raise ValidationError("haar spec needs at least one box")

    @property
    def is_contrast(self) -> bool:
        """Zero weight sum: invariant to constant intensity offsets."""
        return sum(b.weight for b in self.boxes) == 0


def eval_haar(iv: IntegralVolume, center, spec: HaarSpec, scale: float = 1.0) -> float:
    """Weighted sum of box sums (box means when spec.normalize) with the
    box offsets scaled about the center.  Boxes are clipped to the volume
    and evaluated on the clipped extent; fully-outside boxes contribute 0."""
    c = np.asarray([center], dtype=np.int64)
    if not _centers_in_bounds(c, iv.dims):
        raise ValidationError(f"center {tuple(center)} outside dims {iv.dims}")
    return float(eval_haar_batch(iv, c, spec, scale)[0])


def _centers_in_bounds(centers: np.ndarray, dims) -> bool:
    return bool(
        (centers >= 0).all() and (centers < np.asarray(dims)).all()
    )


def eval_haar_batch(
    iv: IntegralVolume, centers: np.ndarray, spec: HaarSpec, scale: float = 1.0
) -> np.ndarray:
    """Vectorized eval_haar for an (N,3) int array of in-bounds centers."""
    dims = np.asarray(iv.dims)
    centers = np.asarray(centers, dtype=np.int64)
    out = np.zeros(len(centers), dtype=np.float64)
    for box in spec.boxes:
        lo_off = np.rint(np.asarray(box.min_off, dtype=np.float64) * scale).astype(np.int64)
        hi_off = np.rint(np.asarray(box.max_off, dtype=np.float64) * scale).astype(np.int64)
        lo = centers + lo_off
        hi = centers + hi_off
        empty = (hi < 0).any(axis=1) | (lo > dims - 1).any(axis=1)
        lo = np.clip(lo, 0, dims - 1)
        hi = np.clip(hi, 0, dims - 1)
        sums = box_sum_batch(iv, lo, hi).astype(np.float64)
        if spec.normalize:
            counts = np.prod(hi - lo + 1, axis=1).astype(np.float64)
            sums = sums / np.where(empty, 1.0, counts)
        out += box.weight * np.where(empty, 0.0, sums)
    return out


def eval_pool_batch(
    iv: IntegralVolume,
    centers: np.ndarray,
    pool: list[HaarSpec],
    scale: float = 1.0,
    feature_ids=None,
) -> np.ndarray:
    """Feature matrix (N, len(feature_ids)) for the given pool subset."""
    ids = range(len(pool)) if feature_ids is None else feature_ids
    cols = [eval_haar_batch(iv, centers, pool[i], scale) for i in ids]
    return np.stack(cols, axis=1) if cols else np.zeros((len(centers), 0))


def sample_haar_pool(seed: int, pool_size: int, max_extent: int) -> list[HaarSpec]:
    """Deterministic randomized pool of 1-, 2-, and 3-box specs whose offsets
    all stay within +-max_extent.  The default mix keeps the majority of
    specs contrast-type (zero weight sum)."""
    if pool_size < 1:
        raise ValidationError("pool_size must be >= 1")
    if max_extent < 2:
        raise ValidationError("max_extent must be >= 2")
    rng = np.random.default_rng(seed)
    pool: list[HaarSpec] = []

    def rand_halves(limit):
        return rng.integers(1, max(2, limit + 1), size=3)

    while len(pool) < pool_size:
        kind = rng.random()
        if kind < 0.30:
            # Single mean box, freely placed.
            h = rand_halves(max_extent // 2)
            c = np.array(
                [rng.integers(-(max_extent - h[i]), max_extent - h[i] + 1) for i in range(3)]
            )
            boxes = (HaarBox(tuple(c - h), tuple(c + h), 1),)
        elif kind < 0.50:
            # Adjacent flank pair along one axis.
            axis = int(rng.integers(0, 3))
            span = int(rng.integers(1, max_extent + 1))
            h = rand_halves(max_extent)
            lo = [-int(h[i]) for i in range(3)]
            hi = [int(h[i]) for i in range(3)]
            lo_a, hi_a = list(lo), list(hi)
            lo_b, hi_b = list(lo), list(hi)
            lo_a[axis], hi_a[axis] = -span, -1
            lo_b[axis], hi_b[axis] = 0, span - 1
            boxes = (
                HaarBox(tuple(lo_a), tuple(hi_a), 1),
                HaarBox(tuple(lo_b), tuple(hi_b), -1),
            )
        elif kind < 0.70:
            # Center-surround pair.
            h_in = rand_halves(max_extent // 2)
            grow = rng.integers(1, max_extent // 2 + 1, size=3)
            h_out = np.minimum(h_in + grow, max_extent)
            boxes = (
                HaarBox(tuple(-h_in), tuple(h_in), 1),
                HaarBox(tuple(-h_out), tuple(h_out), -1),
            )
        else:
            # Center box with two flanks along one axis, weights +2/-1/-1.
            axis = int(rng.integers(0, 3))
            h = rand_halves(max(1, (max_extent - 1) // 3))
            lo_c, hi_c = -h.copy(), h.copy()
            w = 2 * h[axis] + 1
            lo_l, hi_l = lo_c.copy(), hi_c.copy()
            lo_l[axis], hi_l[axis] = lo_c[axis] - w, lo_c[axis] - 1
            lo_r, hi_r = lo_c.copy(), hi_c.copy()
            lo_r[axis], hi_r[axis] = hi_c[axis] + 1, hi_c[axis] + w
            boxes = (
                HaarBox(tuple(lo_c), tuple(hi_c), 2),
                HaarBox(tuple(lo_l), tuple(hi_l), -1),
                HaarBox(tuple(lo_r), tuple(hi_r), -1),
            )
        pool.append(HaarSpec(tuple(boxes)))
    return pool


# ---------------------------------------------------------------------------
# GLCM texture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Glcm:
    """Symmetrized, normalized co-occurrence matrix."""

    matrix: np.ndarray
    quantization: tuple[float, float, int]
    offset: tuple[int, int]
    uniform_fallback: bool = False

    def __post_init__(self):
        m = self.matrix
        if abs(float(m.sum()) - 1.0) > 1e-9:
            raise ValidationError("GLCM entries must sum to 1")
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValidationError("GLCM must be symmetric")
        m.setflags(write=False)


def compute_glcm(window, quantization=(None, None, 32), offset=(1, 0)) -> Glcm:
    """Co-occurrence matrix of quantized levels at the given displacement.

    `window` is a 2D array; offset (dx, dy) pairs element (r, c) with
    (r + dy, c + dx).  Pixels outside [lo, hi] are excluded; when no valid
    pair remains the matrix falls back to uniform and is flagged.
    Quantization bounds default to the window's min/max.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValidationError("GLCM window must be a nonempty 2D array")
    lo, hi, levels = quantization
    levels = int(levels)
    if levels < 2:
        raise ValidationError("GLCM needs at least 2 levels")
    if lo is None:
        lo = float(w.min())
    if hi is None:
        hi = float(w.max())
    if hi < lo:
        raise ValidationError("quantization hi must be >= lo")

    in_range = (w >= lo) & (w <= hi)
    if hi > lo:
        q = np.floor((w - lo) / (hi - lo) * levels).astype(np.int64)
        q = np.clip(q, 0, levels - 1)
    else:
        q = np.zeros(w.shape, dtype=np.int64)

    dx, dy = (int(offset[0]), int(offset[1]))
    nr, nc = w.shape
    r0, r1 = max(0, -dy), min(nr, nr - dy)
    c0, c1 = max(0, -dx), min(nc, nc - dx)
    counts = np.zeros((levels, levels), dtype=np.float64)
    if r0 < r1 and c0 < c1:
        a = q[r0:r1, c0:c1]
        b = q[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        valid = in_range[r0:r1, c0:c1] & in_range[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        np.add.at(counts, (a[valid], b[valid]), 1.0)

    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        return Glcm(
            np.full((levels, levels), 1.0 / levels**2),
            (float(lo), float(hi), levels),
            (dx, dy),
            uniform_fallback=True,
        )
    return Glcm(counts / total, (float(lo), float(hi), levels), (dx, dy))


def haralick(g: Glcm) -> tuple[float, float]:
    """(contrast, homogeneity) of a normalized GLCM."""
    n = g.matrix.shape[0]
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    contrast = float((g.matrix * (i - j) ** 2).sum())
    homogeneity = float((g.matrix / (1.0 + np.abs(i - j))).sum())
    return contrast, homogeneity


def local_homogeneity(window, levels: int = 32) -> float:
    """Haralick homogeneity averaged over offsets (1,0) and (0,1) with
    min/max quantization; the texture cue for the adaptive window."""
    vals = []
    for off in ((1, 0), (0, 1)):
        g = compute_glcm(window, (None, None, levels), off)
        vals.append(haralick(g)[1])
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Self-aligned ray features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientField:
    """Precomputed per-voxel gradients (HU per voxel) of a volume."""

    gx: np.ndarray
    gy: np.ndarray
    gz: np.ndarray
    mag: np.ndarray


def compute_gradient_field(v: Volume3) -> GradientField:
    data = v.data.astype(np.float64)
    comps = []
    for axis in range(3):
        if data.shape[axis] < 2:
            comps.append(np.zeros_like(data))
        else:
            comps.append(np.gradient(data, axis=axis))
    gx, gy, gz = comps
    return GradientField(gx, gy, gz, np.sqrt(gx**2 + gy**2 + gz**2))


@dataclass(frozen=True)
class RayFeatureVector:
    values: np.ndarray
    hit_positions: np.ndarray
    hit_distances: np.ndarray

    def __post_init__(self):
        if self.values.shape != (RAY_VECTOR_LEN,):
            raise ValidationError(f"ray vector must have length {RAY_VECTOR_LEN}")
        if not np.isfinite(self.values).all():
            raise ValidationError("ray features must be finite")


_NB_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
_SAMPLE_FRACS = (np.arange(7, dtype=np.float64) + 1.0) / 8.0


def _trilerp(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at (...,3) float points inside the volume."""
    dims = np.asarray(vol.shape)
    base = np.clip(np.floor(pts).astype(np.int64), 0, np.maximum(dims - 2, 0))
    upper = np.minimum(base + 1, dims - 1)
    frac = pts - base
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    for cx in (0, 1):
        wx = frac[..., 0] if cx else 1.0 - frac[..., 0]
        ix = upper[..., 0] if cx else base[..., 0]
        for cy in (0, 1):
            wy = frac[..., 1] if cy else 1.0 - frac[..., 1]
            iy = upper[..., 1] if cy else base[..., 1]
            for cz in (0, 1):
                wz = frac[..., 2] if cz else 1.0 - frac[..., 2]
                iz = upper[..., 2] if cz else base[..., 2]
                out += wx * wy * wz * vol[ix, iy, iz]
    return out


def ray_features(v: Volume3, center, max_range: int,
                 field: GradientField | None = None) -> RayFeatureVector:
    """Per-ray gradient-maximum alignment features for a single candidate."""
    c = np.asarray([center], dtype=np.int64)
    if not _centers_in_bounds(c, v.dims):
        raise ValidationError(f"center {tuple(center)} outside dims {v.dims}")
    values, hits, dists = ray_features_batch(v, c, max_range, field)
    return RayFeatureVector(values[0], hits[0], dists[0])


def ray_features_batch(
    v: Volume3, centers: np.ndarray, max_range: int,
    field: GradientField | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ray features.

    Returns (values (N, 336), hit_positions (N, 14, 3), hit_distances (N, 14)).
    Hits take the farthest gradient-magnitude maximum along each ray; rays
    with no in-bounds sample hit the center itself at distance 0.
    """
    if field is None:
        field = compute_gradient_field(v)
    dims = np.asarray(v.dims)
    centers = np.asarray(centers, dtype=np.int64)
    n = len(centers)
    data = v.data

    t = np.arange(1, max_range + 1, dtype=np.float64)
    pos = (
        centers[:, None, None, :].astype(np.float64)
        + t[None, None, :, None] * RAY_DIRECTIONS[None, :, None, :]
    )
    vox = np.rint(pos).astype(np.int64)
    inb = ((vox >= 0) & (vox < dims)).all(axis=3)
    voxc = np.clip(vox, 0, dims - 1)

    gm = field.mag[voxc[..., 0], voxc[..., 1], voxc[..., 2]]
    gm_masked = np.where(inb, gm, -np.inf)
    # argmax of the reversed axis picks the farthest maximum.
    idx = max_range - 1 - np.argmax(gm_masked[..., ::-1], axis=2)
    any_valid = inb.any(axis=2)

    ray_idx = np.arange(N_RAYS)[None, :]
    cand_idx = np.arange(n)[:, None]
    hit_vox = voxc[cand_idx, ray_idx, idx]
    hit_vox = np.where(any_valid[..., None], hit_vox, centers[:, None, :])
    hit_dist = np.where(any_valid, t[idx], 0.0)

    def at(vol, p):
        return vol[p[..., 0], p[..., 1], p[..., 2]]

    hu_hit = at(data, hit_vox).astype(np.float64)
    gm_hit = at(field.mag, hit_vox)

    # 3x3x3 neighborhood statistics with face clipping.
    nb = hit_vox[:, :, None, :] + _NB_OFFSETS[None, None, :, :]
    nb_ok = ((nb >= 0) & (nb < dims)).all(axis=3)
    nbc = np.clip(nb, 0, dims - 1)
    hu_nb = at(data, nbc).astype(np.float64)
    gm_nb = at(field.mag, nbc)
    cnt = nb_ok.sum(axis=2).astype(np.float64)

    def masked_stats(vals):
        s = np.where(nb_ok, vals, 0.0).sum(axis=2)
        mean = s / cnt
        var = np.where(nb_ok, (vals - mean[..., None]) ** 2, 0.0).sum(axis=2) / cnt
        return mean, np.sqrt(var)

    hu_mean, hu_std = masked_stats(hu_nb)
    gm_mean, gm_std = masked_stats(gm_nb)
    hu_min = np.where(nb_ok, hu_nb, np.inf).min(axis=2)
    hu_max = np.where(nb_ok, hu_nb, -np.inf).max(axis=2)

    gvec = np.stack(
        [at(field.gx, hit_vox), at(field.gy, hit_vox), at(field.gz, hit_vox)], axis=-1
    )
    gnorm = np.linalg.norm(gvec, axis=-1)
    dot = (gvec * RAY_DIRECTIONS[None, :, :]).sum(axis=-1)
    cosine = np.where(gnorm > 1e-12, dot / np.where(gnorm > 1e-12, gnorm, 1.0), 0.0)

    # Profile samples between center and hit.
    sp = (
        centers[:, None, None, :].astype(np.float64)
        + (hit_dist[..., None, None] * _SAMPLE_FRACS[None, None, :, None])
        * RAY_DIRECTIONS[None, :, None, :]
    )
    hu_prof = _trilerp(data.astype(np.float64), sp)
    gm_prof = _trilerp(field.mag, sp)

    feats = np.empty((n, N_RAYS, FEATURES_PER_RAY), dtype=np.float64)
    feats[..., 0] = hu_hit
    feats[..., 1] = hu_mean
    feats[..., 2] = hu_std
    feats[..., 3] = hu_min
    feats[..., 4] = hu_max
    feats[..., 5] = gm_hit
    feats[..., 6] = gm_mean
    feats[..., 7] = gm_std
    feats[..., 8] = cosine
    feats[..., 9] = hit_dist
    feats[..., 10:17] = hu_prof
    feats[..., 17:24] = gm_prof
    return feats.reshape(n, RAY_VECTOR_LEN), hit_vox, hit_dist
