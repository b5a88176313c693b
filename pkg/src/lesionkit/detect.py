"""Organ ROI localization and the full lesion-detection pipeline.

Detection runs coarse-to-fine: HU-window seeding on a candidate grid
inside the organ ROI, a boosted 3D-Haar stage, a boosted ray-feature
stage, region-growing rough segmentation with a shape/contrast scorer,
a score threshold, and greedy non-maximal suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .boosting import CascadeStage, StrongClassifier, score_batch
from .errors import ConfigError, OrganNotFoundError, ValidationError
from .features import (
    GradientField,
    HaarSpec,
    compute_gradient_field,
    eval_pool_batch,
    ray_features_batch,
)
from .volume import BoxRegion, IntegralVolume, Volume3, build_integral

STAGE_SEEDED = "C0"
STAGE_HAAR = "C1"
STAGE_RAYS = "C2"
STAGE_SCORED = "C3"
STAGE_FINAL = "D"

HAAR_EXTRACTOR = "haar"
RAY_EXTRACTOR = "rays"


@dataclass(frozen=True)
class RoughSegment:
    """Region-grown blob around a candidate with summary statistics.

    `capped` marks blobs that ran into the max-radius ball, i.e. growth
    was stopped by the cap rather than by an intensity boundary.
    """

    mask: np.ndarray
    origin: tuple[int, int, int]
    volume_voxels: int
    mean_hu: float
    std_hu: float
    sphericity: float
    boundary_gradient_mean: float
    shell_contrast: float
    capped: bool = False

    def __post_init__(self):
        if int(self.mask.sum()) != self.volume_voxels:
            raise ValidationError("rough segment population mismatch")
        self.mask.setflags(write=False)

    def global_box(self) -> BoxRegion:
        idx = np.nonzero(self.mask)
        lo = tuple(int(a.min()) + o for a, o in zip(idx, self.origin))
        hi = tuple(int(a.max()) + o for a, o in zip(idx, self.origin))
        return BoxRegion(lo, hi)

    def feature_vector(self) -> np.ndarray:
        return np.array(
            [
                float(self.volume_voxels),
                self.mean_hu,
                self.std_hu,
                self.sphericity,
                self.boundary_gradient_mean,
                self.shell_contrast,
            ]
        )


@dataclass(frozen=True)
class Candidate:
    center: tuple[int, int, int]
    score: float | None = None
    stage: str = STAGE_SEEDED
    rough: RoughSegment | None = None
    box: BoxRegion | None = None


@dataclass(frozen=True)
class DetectorConfig:
    tau: float = 0.5
    hu_window: tuple[float, float] = (-100.0, 200.0)
    stride: int = 2
    nms_radius_mm: float = 10.0
    ray_max_range: int = 16
    rough_max_radius: int = 18
    haar_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


@dataclass(frozen=True)
class OrganROI:
    box: BoxRegion
    score: float


@dataclass(frozen=True)
class OrganModel:
    """Boosted Haar model for one marginal-space stage (position or scale)."""

    pool: tuple[HaarSpec, ...]
    classifier: StrongClassifier
    nominal_radii: tuple[float, float, float]
    scales: tuple[float, ...] = (1.0,)
    coarse_stride: int = 4
    fine_radius: int = 3


@dataclass(frozen=True)
class LesionDetector:
    """Everything detect_lesions needs: organ models, feature pools,
    cascade stages, and the rough-segment scorer."""

    organ_position: OrganModel | None
    organ_scale: OrganModel | None
    haar_pool: tuple[HaarSpec, ...]
    stages: tuple[CascadeStage, ...]
    rough_scorer: StrongClassifier


@dataclass(frozen=True)
class DetectionResult:
    detections: tuple[Candidate, ...]
    counts: dict[str, int]
    roi: OrganROI | None


def _scores_for_pool(iv, centers, pool, classifier, scale):
    """Classifier scores evaluating only the stump-selected pool features."""
    used = sorted({s.feature for s, _ in classifier.stumps})
    X = eval_pool_batch(iv, centers, list(pool), scale, feature_ids=used)
    remapped = classifier.remapped({f: i for i, f in enumerate(used)})
    return score_batch(remapped, X)


def detect_organ_roi(
    v: Volume3,
    pos_model: OrganModel,
    scale_model: OrganModel,
    iv: IntegralVolume | None = None,
) -> OrganROI:
    """Two-stage coarse-to-fine search: best position on a coarse grid
    (refined locally at stride 1), then the best scale at that position.
    Raises OrganNotFoundError when no position scores above 0.5."""
    if iv is None:
        iv = build_integral(v)
    nx, ny, nz = v.dims
    s = pos_model.coarse_stride
    grid = np.stack(
        np.meshgrid(
            np.arange(s // 2, nx, s),
            np.arange(s // 2, ny, s),
            np.arange(s // 2, nz, s),
            indexing="ij",
        ),
        axis=-1,
    ).reshape(-1, 3)
    scores = _scores_for_pool(iv, grid, pos_model.pool, pos_model.classifier, 1.0)
    best = int(np.argmax(scores))
    if scores[best] <= 0.5:
        raise OrganNotFoundError(
            f"best organ-position score {scores[best]:.3f} does not exceed 0.5"
        )

    fr = pos_model.fine_radius
    cx, cy, cz = grid[best]
    fine = np.stack(
        np.meshgrid(
            np.arange(max(cx - fr, 0), min(cx + fr, nx - 1) + 1),
            np.arange(max(cy - fr, 0), min(cy + fr, ny - 1) + 1),
            np.arange(max(cz - fr, 0), min(cz + fr, nz - 1) + 1),
            indexing="ij",
        ),
        axis=-1,
    ).reshape(-1, 3)
    fine_scores = _scores_for_pool(iv, fine, pos_model.pool, pos_model.classifier, 1.0)
    order = np.lexsort((fine[:, 2], fine[:, 1], fine[:, 0], -fine_scores))
    center = tuple(int(c) for c in fine[order[0]])
    pos_score = float(fine_scores[order[0]])

    best_scale, best_scale_score = 1.0, -np.inf
    center_arr = np.asarray([center])
    for sc in scale_model.scales:
        sc_score = float(
            _scores_for_pool(iv, center_arr, scale_model.pool,
                             scale_model.classifier, sc)[0]
        )
        if sc_score > best_scale_score:
            best_scale, best_scale_score = sc, sc_score

    half = [int(math.ceil(best_scale * r * 1.15)) + 2 for r in scale_model.nominal_radii]
    box = BoxRegion(
        tuple(max(c - h, 0) for c, h in zip(center, half)),
        tuple(min(c + h, d - 1) for c, h, d in zip(center, half, v.dims)),
    )
    return OrganROI(box, pos_score)


def seed_candidates(v: Volume3, roi: OrganROI, cfg: DetectorConfig) -> list[Candidate]:
    """Stage C0: grid positions inside the ROI whose HU lies within the
    window (inclusive on both ends)."""
    lo_hu, hi_hu = cfg.hu_window
    (x0, y0, z0), (x1, y1, z1) = roi.box.min, roi.box.max
    xs = np.arange(x0, x1 + 1, cfg.stride)
    ys = np.arange(y0, y1 + 1, cfg.stride)
    zs = np.arange(z0, z1 + 1, cfg.stride)
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    hu = v.data[grid[:, 0], grid[:, 1], grid[:, 2]]
    keep = grid[(hu >= lo_hu) & (hu <= hi_hu)]
    return [Candidate(tuple(int(c) for c in p)) for p in keep]


_CROSS = ndimage.generate_binary_structure(3, 1)


def _dilate6(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:, :, :] |= m[:-1, :, :]
    out[:-1, :, :] |= m[1:, :, :]
    out[:, 1:, :] |= m[:, :-1, :]
    out[:, :-1, :] |= m[:, 1:, :]
    out[:, :, 1:] |= m[:, :, :-1]
    out[:, :, :-1] |= m[:, :, 1:]
    return out


def rough_segment(
    v: Volume3, c: Candidate, max_radius: int,
    hu_window: tuple[float, float] = (-100.0, 200.0),
    field: GradientField | None = None,
) -> RoughSegment:
    """Region growing from the candidate center.

    Level-synchronous BFS: each wave accepts 6-neighbors of the blob
    within the max_radius ball whose HU lies within max(2*std, 10) of the
    running blob mean (statistics from the previous wave), so the result
    is independent of within-wave ordering.
    """
    x, y, z = c.center
    hu0 = float(v.data[x, y, z])
    if not (hu_window[0] <= hu0 <= hu_window[1]):
        raise ValidationError(f"seed HU {hu0} outside window {hu_window}")
    nx, ny, nz = v.dims
    r = int(max_radius)
    lo = (max(x - r, 0), max(y - r, 0), max(z - r, 0))
    hi = (min(x + r, nx - 1), min(y + r, ny - 1), min(z + r, nz - 1))
    cube = v.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].astype(np.float64)
    cx, cy, cz = x - lo[0], y - lo[1], z - lo[2]
    gx = np.arange(cube.shape[0])[:, None, None] - cx
    gy = np.arange(cube.shape[1])[None, :, None] - cy
    gz = np.arange(cube.shape[2])[None, None, :] - cz
    dist2 = gx**2 + gy**2 + gz**2
    ball = dist2 <= r**2

    blob = np.zeros(cube.shape, dtype=bool)
    blob[cx, cy, cz] = True
    blocked = ~ball
    n_acc, s_acc, ss_acc = 1.0, hu0, hu0 * hu0
    while True:
        mean = s_acc / n_acc
        var = max(ss_acc / n_acc - mean * mean, 0.0)
        thresh = max(2.0 * math.sqrt(var), 10.0)
        frontier = _dilate6(blob) & ~blob & ~blocked
        if not frontier.any():
            break
        ok = frontier & (np.abs(cube - mean) <= thresh)
        if not ok.any():
            break
        new_vals = cube[ok]
        n_acc += len(new_vals)
        s_acc += float(new_vals.sum())
        ss_acc += float((new_vals**2).sum())
        blob |= ok
        blocked |= frontier & ~ok

    vals = cube[blob]
    capped = bool((dist2[blob] > (r - 1.0) ** 2).any())
    volume = int(blob.sum())
    coords = np.argwhere(blob)
    centroid = coords.mean(axis=0)
    r_eq = (3.0 * volume / (4.0 * math.pi)) ** (1.0 / 3.0)
    r_max = float(np.sqrt(((coords - centroid) ** 2).sum(axis=1)).max()) + 0.5
    sphericity = min(1.0, (r_eq + 0.5) / r_max)

    boundary = blob & ~ndimage.binary_erosion(blob, _CROSS, border_value=0)
    if field is None:
        gxx = np.gradient(cube, axis=0) if cube.shape[0] > 1 else np.zeros_like(cube)
        gyy = np.gradient(cube, axis=1) if cube.shape[1] > 1 else np.zeros_like(cube)
        gzz = np.gradient(cube, axis=2) if cube.shape[2] > 1 else np.zeros_like(cube)
        gmag = np.sqrt(gxx**2 + gyy**2 + gzz**2)
    else:
        gmag = field.mag[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    boundary_grad = float(gmag[boundary].mean()) if boundary.any() else 0.0

    shell = ndimage.binary_dilation(blob, _CROSS, iterations=2) & ~blob
    shell_contrast = float(vals.mean() - cube[shell].mean()) if shell.any() else 0.0

    return RoughSegment(
        mask=blob,
        origin=lo,
        volume_voxels=volume,
        mean_hu=float(vals.mean()),
        std_hu=float(vals.std()),
        sphericity=float(sphericity),
        boundary_gradient_mean=boundary_grad,
        shell_contrast=shell_contrast,
        capped=capped,
    )


def _recenter_on_darkness(v: Volume3, center, search_radius: int) -> tuple[int, int, int]:
    """Move the center to the darkness-weighted centroid of the smoothed
    image within the search ball.

    Lesions are darker than the surrounding tissue; after box smoothing
    the contrast survives the voxel noise, and the centroid of the
    below-median deficit lands near the lesion center for any lesion
    size.  Without a meaningful deficit the center stays put.
    """
    x, y, z = center
    nx, ny, nz = v.dims
    r = int(search_radius) + 3
    lo = (max(x - r, 0), max(y - r, 0), max(z - r, 0))
    hi = (min(x + r, nx - 1), min(y + r, ny - 1), min(z + r, nz - 1))
    cube = v.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].astype(np.float64)
    smooth = ndimage.uniform_filter(cube, size=5, mode="nearest")
    gx = np.arange(cube.shape[0])[:, None, None] - (x - lo[0])
    gy = np.arange(cube.shape[1])[None, :, None] - (y - lo[1])
    gz = np.arange(cube.shape[2])[None, None, :] - (z - lo[2])
    ball = gx**2 + gy**2 + gz**2 <= search_radius**2
    level = np.median(smooth[ball])
    deficit = np.where(ball, np.maximum(level - smooth, 0.0), 0.0)
    total = deficit.sum()
    if total < 1.0:
        return tuple(center)
    coords = np.stack(
        np.meshgrid(*[np.arange(s) for s in cube.shape], indexing="ij"), axis=-1
    )
    centroid = (deficit[..., None] * coords).reshape(-1, 3).sum(axis=0) / total
    return tuple(int(round(c)) + o for c, o in zip(centroid, lo))


def _radial_radius_estimate(v: Volume3, center, max_radius: int) -> int:
    """Lesion radius from the radial mean-HU profile around the center:
    the first shell whose mean crosses halfway from the core level to the
    far level.  Robust to noise because shells average many voxels."""
    x, y, z = center
    nx, ny, nz = v.dims
    r = int(max_radius)
    lo = (max(x - r, 0), max(y - r, 0), max(z - r, 0))
    hi = (min(x + r, nx - 1), min(y + r, ny - 1), min(z + r, nz - 1))
    cube = v.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1].astype(np.float64)
    gx = np.arange(cube.shape[0])[:, None, None] - (x - lo[0])
    gy = np.arange(cube.shape[1])[None, :, None] - (y - lo[1])
    gz = np.arange(cube.shape[2])[None, None, :] - (z - lo[2])
    dist = np.sqrt(gx**2 + gy**2 + gz**2)
    shells = np.clip(np.rint(dist).astype(np.int64), 0, r)
    sums = np.bincount(shells.ravel(), weights=cube.ravel(), minlength=r + 1)
    counts = np.bincount(shells.ravel(), minlength=r + 1)
    profile = sums / np.maximum(counts, 1)
    core = profile[:3].mean()
    far = profile[max(r - 2, 3):].mean()
    if abs(far - core) < 5.0:
        return 3
    half = 0.5 * (core + far)
    for rr in range(2, r + 1):
        if (profile[rr] - half) * (far - core) > 0:
            return rr
    return r


def detection_box(v: Volume3, c: Candidate, rough: RoughSegment,
                  max_radius: int) -> BoxRegion:
    """Detection bounding box: the rough segment's tight box, unless
    growth hit the radius cap (leaked through a weak boundary), in which
    case a radial contrast-profile radius around the re-centered point
    is used."""
    if not rough.capped:
        return rough.global_box()
    center = _recenter_on_darkness(v, c.center, max_radius)
    est = _radial_radius_estimate(v, center, max_radius) + 1
    lo = [min(max(q - est, 0), s) for q, s in zip(center, c.center)]
    hi = [
        max(min(q + est, d - 1), s)
        for q, s, d in zip(center, c.center, v.dims)
    ]
    return BoxRegion(tuple(lo), tuple(hi))


def score_candidate(c: Candidate, rough: RoughSegment,
                    scorer: StrongClassifier) -> float:
    """Calibrated lesion probability from the 6-feature rough vector."""
    from .boosting import score as _score

    return _score(scorer, rough.feature_vector())


def _box_iou(a: BoxRegion, b: BoxRegion) -> float:
    lo = tuple(max(x, y) for x, y in zip(a.min, b.min))
    hi = tuple(min(x, y) for x, y in zip(a.max, b.max))
    if any(l > h for l, h in zip(lo, hi)):
        return 0.0
    inter = 1
    for l, h in zip(lo, hi):
        inter *= h - l + 1
    return inter / (a.volume() + b.volume() - inter)


def dedupe_by_box(cands: list[Candidate], iou_threshold: float = 0.5) -> list[Candidate]:
    """Collapse candidates that describe the same object: many seeds
    inside one lesion grow overlapping blobs, and they are one detection
    hypothesis, not several.  A candidate is a duplicate when its box
    overlaps a kept one heavily or its center lies inside a kept box.
    Greedy by descending score with lexicographic center tie-break."""
    ordered = sorted(cands, key=lambda c: (-(c.score or 0.0), c.center))
    kept: list[Candidate] = []
    for c in ordered:
        dup = any(
            _box_iou(c.box, k.box) >= iou_threshold or k.box.contains(c.center)
            for k in kept
        )
        if not dup:
            kept.append(c)
    return kept


def nms(cands: list[Candidate], radius_mm: float, spacing) -> list[Candidate]:
    """Greedy suppression by descending score; candidates within the
    physical radius of a kept one are dropped.  Score ties resolve to the
    lexicographically smaller center."""
    if any(c.score is None for c in cands):
        raise ValidationError("all candidates must be scored before NMS")
    sx, sy, sz = spacing
    ordered = sorted(cands, key=lambda c: (-c.score, c.center))
    kept: list[Candidate] = []
    for c in ordered:
        close = False
        for k in kept:
            d = math.sqrt(
                ((c.center[0] - k.center[0]) * sx) ** 2
                + ((c.center[1] - k.center[1]) * sy) ** 2
                + ((c.center[2] - k.center[2]) * sz) ** 2
            )
            if d <= radius_mm:
                close = True
                break
        if not close:
            kept.append(c)
    return kept


def detect_lesions(
    v: Volume3, det: LesionDetector, cfg: DetectorConfig
) -> DetectionResult:
    """Full pipeline: ROI, HU seeding, Haar stage, ray stage, rough
    segmentation scoring, tau threshold, NMS.

    An undetectable organ yields an empty result rather than an error.
    """
    if not det.stages or det.rough_scorer is None:
        raise ConfigError("detector is missing cascade stages or the rough scorer")
    counts = {k: 0 for k in ("C0", "C1", "C2", "C3", "D")}
    iv = build_integral(v)

    if det.organ_position is not None and det.organ_scale is not None:
        try:
            roi = detect_organ_roi(v, det.organ_position, det.organ_scale, iv)
        except OrganNotFoundError:
            return DetectionResult((), counts, None)
    else:
        roi = OrganROI(BoxRegion((0, 0, 0), tuple(d - 1 for d in v.dims)), 1.0)

    c0 = seed_candidates(v, roi, cfg)
    counts["C0"] = len(c0)
    if not c0:
        return DetectionResult((), counts, roi)
    centers = np.array([c.center for c in c0])

    stage_haar = det.stages[0]
    scores1 = _scores_for_pool(iv, centers, det.haar_pool,
                               stage_haar.classifier, cfg.haar_scale)
    keep1 = scores1 >= stage_haar.reject_threshold
    centers = centers[keep1]
    counts["C1"] = len(centers)
    if not len(centers):
        return DetectionResult((), counts, roi)

    field = compute_gradient_field(v)
    stage_rays = det.stages[1]
    ray_vals, _, _ = ray_features_batch(v, centers, cfg.ray_max_range, field)
    scores2 = score_batch(stage_rays.classifier, ray_vals)
    keep2 = scores2 >= stage_rays.reject_threshold
    centers = centers[keep2]
    scores2 = scores2[keep2]
    counts["C2"] = len(centers)

    scored: list[Candidate] = []
    for i, p in enumerate(centers):
        cand = Candidate(tuple(int(q) for q in p), float(scores2[i]), STAGE_RAYS)
        rough = rough_segment(v, cand, cfg.rough_max_radius, cfg.hu_window, field)
        prob = score_candidate(cand, rough, det.rough_scorer)
        box = detection_box(v, cand, rough, cfg.rough_max_radius)
        scored.append(replace(cand, score=prob, stage=STAGE_SCORED,
                              rough=rough, box=box))

    c3 = [c for c in scored if c.score >= cfg.tau]
    counts["C3"] = len(c3)

    deduped = dedupe_by_box(c3)
    final = nms(deduped, cfg.nms_radius_mm, v.spacing)
    final = [replace(c, stage=STAGE_FINAL) for c in final]
    counts["D"] = len(final)
    return DetectionResult(tuple(final), counts, roi)
