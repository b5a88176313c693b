"""Training orchestration and the end-to-end evaluation harness.

All randomness flows from one master seed through named substreams
(organ-pool, haar-pool, sampling, cnn), so any stage is independently
reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .boosting import StageSpec, StrongClassifier, train_adaboost, train_cascade
from .cnn import CnnParams, init_cnn, label_patch, make_patch, sgd_train
from .detect import (
    HAAR_EXTRACTOR,
    RAY_EXTRACTOR,
    Candidate,
    DetectionResult,
    DetectorConfig,
    LesionDetector,
    OrganModel,
    detect_lesions,
    rough_segment,
)
from .errors import ConfigError, ValidationError
from .features import eval_pool_batch, ray_features_batch, sample_haar_pool
from .levelset import SegmentConfig, segment_lesion
from .metrics import MatchReport, SegReport, combine_reports, match_detections, slice_dice
from .phantom import BACKGROUND_HU, ORGAN_HU, GroundTruth
from .util import substream
from .volume import BoxRegion, Mask3, Volume3, read_mask, read_volume


@dataclass(frozen=True)
class TrainConfig:
    pool_size: int = 400
    pool_max_extent: int = 10
    stage_rounds: tuple[int, int] = (200, 200)
    stage_recalls: tuple[float, float] = (0.99, 0.99)
    scorer_rounds: int = 200
    organ_pool_size: int = 160
    organ_pool_extent: int = 18
    organ_rounds: int = 48
    organ_scales: tuple[float, ...] = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
    neg_per_volume: int = 1500
    cnn_epochs: int = 12
    cnn_lr: float = 0.01
    cnn_patches_per_class: int = 3


@dataclass(frozen=True)
class VolumeEntry:
    volume_id: str
    volume: Volume3
    gt: GroundTruth


def derive_organ_box(v: Volume3) -> BoxRegion:
    """Bounding box of the largest above-threshold connected component;
    the soft-tissue organ sits well above the background level."""
    thresh = 0.5 * (BACKGROUND_HU + ORGAN_HU)
    fg = v.data > thresh
    labeled, n = ndimage.label(fg)
    if n == 0:
        raise ValidationError("no organ-like component found")
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, range(1, n + 1))
    main = int(np.argmax(sizes)) + 1
    idx = np.nonzero(labeled == main)
    return BoxRegion(
        tuple(int(a.min()) for a in idx), tuple(int(a.max()) for a in idx)
    )


def load_manifest(path) -> list[VolumeEntry]:
    """Read a dataset manifest and its volume/mask pairs."""
    with open(path) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for item in manifest:
        v = read_volume(os.path.join(base, item["volume"]))
        m = read_mask(os.path.join(base, item["mask"]))
        boxes = tuple(
            BoxRegion(tuple(l["box_min"]), tuple(l["box_max"]))
            for l in item["lesions"]
        )
        gt = GroundTruth(mask=m, boxes=boxes, organ_box=derive_organ_box(v))
        entries.append(VolumeEntry(os.path.splitext(item["volume"])[0], v, gt))
    return entries


# ---------------------------------------------------------------------------
# Detector training
# ---------------------------------------------------------------------------

def _organ_training_samples(entries, rng):
    """Per-volume organ centers, scale factors, and negative positions."""
    half_extents = []
    for e in entries:
        box = e.gt.organ_box
        half_extents.append([(b - a) / 2.0 for a, b in zip(box.min, box.max)])
    nominal = tuple(float(np.mean([h[i] for h in half_extents])) for i in range(3))

    pos_centers, scales, neg_centers = [], [], []
    for e, half in zip(entries, half_extents):
        box = e.gt.organ_box
        center = np.array([round(c) for c in box.center], dtype=np.int64)
        s_true = float(np.mean([h / n for h, n in zip(half, nominal)]))
        for _ in range(7):
            jit = rng.integers(-2, 3, size=3)
            p = np.clip(center + jit, 0, np.array(e.volume.dims) - 1)
            pos_centers.append((e, tuple(int(q) for q in p)))
        scales.append((e, tuple(int(q) for q in center), s_true))
        dims = np.array(e.volume.dims)
        n_neg = 0
        while n_neg < 40:
            p = rng.integers(0, dims, size=3)
            if np.linalg.norm(p - center) > 10:
                neg_centers.append((e, tuple(int(q) for q in p)))
                n_neg += 1
    return nominal, pos_centers, scales, neg_centers


def _train_organ_models(entries, integrals, seed, cfg: TrainConfig):
    rng = substream(seed, "organ-sampling")
    pool = tuple(sample_haar_pool(
        substream(seed, "organ-pool").integers(0, 2**63), cfg.organ_pool_size,
        cfg.organ_pool_extent,
    ))
    nominal, pos_centers, scale_truth, neg_centers = _organ_training_samples(
        entries, rng
    )

    rows, labels = [], []
    for e, p in pos_centers:
        rows.append(eval_pool_batch(integrals[e.volume_id], np.array([p]), list(pool))[0])
        labels.append(1.0)
    for e, p in neg_centers:
        rows.append(eval_pool_batch(integrals[e.volume_id], np.array([p]), list(pool))[0])
        labels.append(-1.0)
    pos_clf = train_adaboost(np.array(rows), np.array(labels), cfg.organ_rounds)
    pos_model = OrganModel(pool, pos_clf, nominal)

    rows, labels = [], []
    for e, center, s_true in scale_truth:
        for s in cfg.organ_scales:
            rows.append(
                eval_pool_batch(integrals[e.volume_id], np.array([center]),
                                list(pool), scale=s)[0]
            )
            labels.append(1.0 if abs(s - s_true) <= 0.07 else -1.0)
    scale_clf = train_adaboost(np.array(rows), np.array(labels), cfg.organ_rounds)
    scale_model = OrganModel(pool, scale_clf, nominal, scales=cfg.organ_scales)
    return pos_model, scale_model


def _candidate_training_set(entries, det_cfg: DetectorConfig, seed):
    """Labeled candidate grid points: +1 inside a lesion, -1 outside the
    2-voxel dilation, ambiguous ring dropped; negatives subsampled."""
    rng = substream(seed, "candidate-sampling")
    struct = ndimage.generate_binary_structure(3, 1)
    per_volume = []
    for e in entries:
        lo_hu, hi_hu = det_cfg.hu_window
        box = e.gt.organ_box
        xs = np.arange(box.min[0], box.max[0] + 1, det_cfg.stride)
        ys = np.arange(box.min[1], box.max[1] + 1, det_cfg.stride)
        zs = np.arange(box.min[2], box.max[2] + 1, det_cfg.stride)
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        hu = e.volume.data[grid[:, 0], grid[:, 1], grid[:, 2]]
        grid = grid[(hu >= lo_hu) & (hu <= hi_hu)]

        lesion = e.gt.mask.data != 0
        ring = ndimage.binary_dilation(lesion, struct, iterations=2) & ~lesion
        at = lambda m: m[grid[:, 0], grid[:, 1], grid[:, 2]]
        is_pos = at(lesion)
        is_ring = at(ring)
        pos = grid[is_pos]
        neg = grid[~is_pos & ~is_ring]
        if len(neg) > 3000:
            neg = neg[rng.choice(len(neg), size=3000, replace=False)]
        per_volume.append((e, pos, neg))
    return per_volume


def train_detector(
    entries: list[VolumeEntry],
    seed: int,
    cfg: TrainConfig = TrainConfig(),
    det_cfg: DetectorConfig = DetectorConfig(),
) -> LesionDetector:
    """Train organ models, the two cascade stages, and the rough-segment
    scorer from ground-truth-annotated volumes."""
    if not entries:
        raise ConfigError("training manifest is empty")
    from .volume import build_integral

    integrals = {e.volume_id: build_integral(e.volume) for e in entries}
    pos_model, scale_model = _train_organ_models(entries, integrals, seed, cfg)

    pool = tuple(sample_haar_pool(
        substream(seed, "haar-pool").integers(0, 2**63),
        cfg.pool_size, cfg.pool_max_extent,
    ))

    per_volume = _candidate_training_set(entries, det_cfg, seed)
    blocks_haar, blocks_rays, labels = [], [], []
    for e, pos, neg in per_volume:
        centers = np.vstack([pos, neg])
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        haar = eval_pool_batch(integrals[e.volume_id], centers, list(pool),
                               det_cfg.haar_scale)
        rays, _, _ = ray_features_batch(e.volume, centers, det_cfg.ray_max_range)
        blocks_haar.append(haar)
        blocks_rays.append(rays)
        labels.append(y)
    X_haar = np.vstack(blocks_haar)
    X_rays = np.vstack(blocks_rays)
    y = np.concatenate(labels)

    stages = train_cascade(
        [
            StageSpec(HAAR_EXTRACTOR, cfg.stage_rounds[0], cfg.stage_recalls[0]),
            StageSpec(RAY_EXTRACTOR, cfg.stage_rounds[1], cfg.stage_recalls[1]),
        ],
        {HAAR_EXTRACTOR: X_haar, RAY_EXTRACTOR: X_rays},
        y,
    )

    # Rough-segment scorer: cascade survivors plus the hardest rejected
    # negatives (by summed stage score), so its negative distribution
    # matches what actually reaches it at detection time.
    from .boosting import apply_cascade_batch, score_batch

    accepted, _, _ = apply_cascade_batch(
        stages, {HAAR_EXTRACTOR: X_haar, RAY_EXTRACTOR: X_rays}
    )
    hardness = (
        score_batch(stages[0].classifier, X_haar)
        + score_batch(stages[1].classifier, X_rays)
    )
    rng = substream(seed, "scorer-sampling")
    rows, row_labels = [], []
    offset = 0
    for e, pos, neg in per_volume:
        centers = np.vstack([pos, neg])
        yv = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        sl = slice(offset, offset + len(centers))
        surv = accepted[sl]
        offset += len(centers)
        take = np.zeros(len(centers), dtype=bool)
        neg_rows = np.nonzero(yv < 0)[0]
        hard_order = neg_rows[np.argsort(-hardness[sl][neg_rows], kind="stable")]
        take[hard_order[:400]] = True
        # Keep the class sizes comparable: subsample surviving positives.
        pos_rows = np.nonzero((yv > 0) & surv)[0]
        if len(pos_rows) == 0:
            pos_rows = np.nonzero(yv > 0)[0]
        if len(pos_rows) > 250:
            pos_rows = pos_rows[rng.choice(len(pos_rows), size=250, replace=False)]
        take[pos_rows] = True
        for p, lab in zip(centers[take], yv[take]):
            seg = rough_segment(e.volume, Candidate(tuple(int(q) for q in p)),
                                det_cfg.rough_max_radius, det_cfg.hu_window)
            rows.append(seg.feature_vector())
            row_labels.append(lab)
    rows = np.array(rows)
    row_labels = np.array(row_labels)
    if not ((row_labels > 0).any() and (row_labels < 0).any()):
        raise ConfigError("candidate pool lacks a class; cannot train scorer")
    scorer = train_adaboost(rows, row_labels, cfg.scorer_rounds)

    return LesionDetector(pos_model, scale_model, pool, tuple(stages), scorer)


# ---------------------------------------------------------------------------
# CNN training data
# ---------------------------------------------------------------------------

def build_patch_dataset(entries, seed, cfg: TrainConfig = TrainConfig()):
    """Contour-position patches: stratified radius ratios around every
    ground-truth lesion slice, plus lesion-free organ views labeled
    outside-far so uniform tissue steers contraction."""
    rng = substream(seed, "cnn-sampling")
    patches, labels = [], []
    rho_ranges = {1: (0.45, 0.68), 2: (0.75, 1.25), 3: (1.35, 3.2)}
    for e in entries:
        mask = e.gt.mask.data
        organish = e.volume.data > 0.5 * (BACKGROUND_HU + ORGAN_HU)
        for z in range(e.volume.dims[2]):
            slice_img = e.volume.data[:, :, z].astype(np.float64)
            for k in e.gt.mask.labels:
                gts = mask[:, :, z] == k
                n = int(gts.sum())
                if n < 12:
                    continue
                r_eq = np.sqrt(n / np.pi)
                cx, cy = np.argwhere(gts).mean(axis=0)
                for cls in (1, 2, 3):
                    lo, hi = rho_ranges[cls]
                    for _ in range(cfg.cnn_patches_per_class):
                        rho = rng.uniform(lo, hi)
                        jit = rng.uniform(-0.2, 0.2, size=2) * r_eq
                        center = (cx + jit[0], cy + jit[1])
                        radius = max(rho * r_eq, 2.0)
                        try:
                            lab = label_patch(center, radius, gts)
                            patch = make_patch(slice_img, center, radius)
                        except ValidationError:
                            continue
                        patches.append(patch)
                        labels.append(lab)
            if z % 2 == 0:
                free = organish[:, :, z] & (mask[:, :, z] == 0)
                pts = np.argwhere(free)
                if len(pts) > 50:
                    for _ in range(2):
                        px, py = pts[rng.integers(len(pts))]
                        try:
                            patch = make_patch(
                                slice_img, (float(px), float(py)),
                                float(rng.uniform(3, 12)),
                            )
                        except ValidationError:
                            continue
                        patches.append(patch)
                        labels.append(3)
    return np.array(patches), np.array(labels)


def train_cnn(entries, seed, cfg: TrainConfig = TrainConfig()) -> CnnParams:
    patches, labels = build_patch_dataset(entries, seed, cfg)
    net = init_cnn(substream(seed, "cnn-init").integers(0, 2**31))
    trained, _ = sgd_train(
        net, patches, labels, epochs=cfg.cnn_epochs, lr=cfg.cnn_lr,
        seed=substream(seed, "cnn-shuffle").integers(0, 2**31),
    )
    return trained


# ---------------------------------------------------------------------------
# End-to-end evaluation
# ---------------------------------------------------------------------------

def manual_detections(gt: GroundTruth) -> list[Candidate]:
    """Ground-truth boxes fed directly to segmentation (manual mode)."""
    dets = []
    for box in gt.boxes:
        center = tuple(int(round(c)) for c in box.center)
        dets.append(Candidate(center, 1.0, "D", box=box))
    return dets


def run_pipeline(
    entries: list[VolumeEntry],
    detector: LesionDetector | None,
    cnn: CnnParams,
    det_cfg: DetectorConfig = DetectorConfig(),
    seg_cfg: SegmentConfig = SegmentConfig(),
    manual_init: bool = False,
) -> tuple[MatchReport, SegReport, list[dict]]:
    """Detect (or take ground-truth boxes) then segment every volume.

    Dice is computed on true-positive detections only, each against its
    matched ground-truth label.
    """
    if not manual_init and detector is None:
        raise ConfigError("automated mode needs a trained detector")
    match_reports = []
    dices = []
    artifacts = []
    for e in entries:
        if manual_init:
            dets = manual_detections(e.gt)
            counts = {}
        else:
            result = detect_lesions(e.volume, detector, det_cfg)
            dets = list(result.detections)
            counts = result.counts
        report = match_detections(dets, e.gt)
        match_reports.append(report)
        volume_dices = []
        for det_idx, label in report.pairs:
            seg = segment_lesion(e.volume, dets[det_idx].box, cnn, seg_cfg)
            d = slice_dice(seg.mask.data, e.gt.mask.data == label)
            dices.append(d)
            volume_dices.append({"label": label, "dice": d})
        artifacts.append(
            {
                "volume_id": e.volume_id,
                "counts": counts,
                "detections": [
                    {
                        "center": list(d.center),
                        "score": d.score,
                        "box_min": list(d.box.min) if d.box else None,
                        "box_max": list(d.box.max) if d.box else None,
                    }
                    for d in dets
                ],
                "matched_pairs": [list(p) for p in report.pairs],
                "dice": volume_dices,
            }
        )
    combined = combine_reports(match_reports)
    return combined, SegReport(tuple(dices)), artifacts
