"""Evaluation metrics: Dice overlap, detection-to-truth matching, reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .phantom import GroundTruth
from .volume import Mask3


def _as_bool(m) -> np.ndarray:
    if isinstance(m, Mask3):
        return m.data != 0
    return np.asarray(m) != 0


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty, 0.0 when
    exactly one is."""
    ab = _as_bool(a)
    bb = _as_bool(b)
    if ab.shape != bb.shape:
        raise ValidationError(f"mask shapes differ: {ab.shape} vs {bb.shape}")
    na, nb = int(ab.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(ab, bb).sum())
    return 2.0 * inter / (na + nb)


def slice_dice(pred, gt_label_mask) -> float:
    """Dice aggregated over the axial slices where the ground-truth label
    is present (the slice-wise evaluation protocol)."""
    p = _as_bool(pred)
    g = _as_bool(gt_label_mask)
    if p.shape != g.shape:
        raise ValidationError("mask shapes differ")
    zs = np.nonzero(g.any(axis=(0, 1)))[0]
    if len(zs) == 0:
        raise ValidationError("ground-truth label empty")
    inter = 0
    denom = 0
    for z in zs:
        inter += int(np.logical_and(p[:, :, z], g[:, :, z]).sum())
        denom += int(p[:, :, z].sum()) + int(g[:, :, z].sum())
    return 2.0 * inter / denom if denom else 1.0


@dataclass(frozen=True)
class MatchReport:
    tp: int
    fp: int
    fn: int
    matched: tuple[bool, ...]
    pairs: tuple[tuple[int, int], ...]
    volume_count: int = 1

    @property
    def sensitivity(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 1.0

    @property
    def fp_per_volume(self) -> float:
        return self.fp / max(self.volume_count, 1)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "sensitivity": self.sensitivity,
            "fp_per_volume": self.fp_per_volume,
            "volume_count": self.volume_count,
            "matching_rule": "center inside ground-truth mask dilated by 1 voxel",
        }


def combine_reports(reports: list[MatchReport]) -> MatchReport:
    return MatchReport(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        matched=tuple(m for r in reports for m in r.matched),
        pairs=(),
        volume_count=sum(r.volume_count for r in reports),
    )


def match_detections(dets, gt: GroundTruth) -> MatchReport:
    """Greedy one-to-one matching by descending score: a detection claims
    an unmatched lesion when its center lies inside that lesion's mask
    dilated by one voxel.  Leftover detections are FP, leftover lesions FN.
    """
    labels = gt.mask.labels
    struct = ndimage.generate_binary_structure(3, 1)
    dilated = {
        k: ndimage.binary_dilation(gt.mask.data == k, struct) for k in labels
    }
    order = sorted(
        range(len(dets)),
        key=lambda i: (-(dets[i].score if dets[i].score is not None else 0.0),
                       dets[i].center),
    )
    matched_label: dict[int, int] = {}
    pairs = []
    fp = 0
    for i in order:
        c = dets[i].center
        hit = None
        for k in labels:
            if k in matched_label.values():
                continue
            if dilated[k][c[0], c[1], c[2]]:
                hit = k
                break
        if hit is None:
            fp += 1
        else:
            matched_label[i] = hit
            pairs.append((i, hit))
    matched_flags = tuple(k in matched_label.values() for k in labels)
    tp = len(matched_label)
    return MatchReport(
        tp=tp,
        fp=fp,
        fn=len(labels) - tp,
        matched=matched_flags,
        pairs=tuple(pairs),
    )


@dataclass(frozen=True)
class SegReport:
    dices: tuple[float, ...]

    def __post_init__(self):
        if any(not (0.0 <= d <= 1.0) for d in self.dices):
            raise ValidationError("Dice values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.dices)) if self.dices else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.dices)) if self.dices else 0.0

    def to_dict(self) -> dict:
        return {
            "per_lesion_dice": list(self.dices),
            "mean": self.mean,
            "std": self.std,
        }
