"""Discrete AdaBoost over decision stumps, probability calibration, and
cascade assembly.

Stump search is exact: thresholds are midpoints between consecutive unique
sorted feature values, ties broken by lowest feature index, then lowest
threshold, then polarity +1.  Training is fully deterministic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class Stump:
    """Single-feature threshold classifier: polarity * sign(x[f] - threshold)."""

    feature: int
    threshold: float
    polarity: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        above = X[:, self.feature] > self.threshold
        return self.polarity * np.where(above, 1.0, -1.0)


@dataclass(frozen=True)
class StrongClassifier:
    """Weighted stump ensemble with a logistic margin-to-probability map."""

    stumps: tuple[tuple[Stump, float], ...]
    calib_a: float = 1.0
    calib_b: float = 0.0

    def __post_init__(self):
        if not self.stumps:
            raise ValidationError("classifier needs at least one stump")
        if not all(math.isfinite(a) and a >= 0 for _, a in self.stumps):
            raise ValidationError("stump weights must be finite and >= 0")

    @property
    def max_feature(self) -> int:
        return max(s.feature for s, _ in self.stumps)

    def margin(self, X: np.ndarray) -> np.ndarray:
        m = np.zeros(len(X), dtype=np.float64)
        for stump, alpha in self.stumps:
            m += alpha * stump.predict(X)
        return m

    def remapped(self, mapping: dict[int, int]) -> "StrongClassifier":
        """Copy with feature indices renumbered (for reduced feature matrices)."""
        return StrongClassifier(
            tuple(
                (Stump(mapping[s.feature], s.threshold, s.polarity), a)
                for s, a in self.stumps
            ),
            self.calib_a,
            self.calib_b,
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def score(c: StrongClassifier, x) -> float:
    """Calibrated probability of the positive class for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) <= c.max_feature:
        raise ValidationError(
            f"feature vector of dim {x.shape} cannot index feature {c.max_feature}"
        )
    return float(score_batch(c, x[None, :])[0])


def score_batch(c: StrongClassifier, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] <= c.max_feature:
        raise ValidationError(
            f"feature matrix of shape {X.shape} cannot index feature {c.max_feature}"
        )
    return _sigmoid(c.calib_a * c.margin(X) + c.calib_b)


def _best_stump(X, y, w, orders, boundary_masks):
    """Exact weighted-error stump search.

    Returns (stump, epsilon, predictions).  Scans features in ascending
    order and keeps strict improvements only, so the documented tie-break
    (lowest feature, lowest threshold, polarity +1 first) is enforced.
    """
    n, n_feat = X.shape
    w_total = w.sum()
    best = None
    for f in range(n_feat):
        bmask = boundary_masks[f]
        if not bmask.any():
            continue
        order = orders[:, f]
        v = X[order, f]
        ws = w[order]
        cp = np.cumsum(ws * (y[order] > 0))
        call = np.cumsum(ws)
        cn = call - cp
        wn = cn[-1]
        # Threshold after sorted position i: polarity +1 errs on positives
        # at or below plus negatives above.
        e_plus = cp + (wn - cn)
        e_minus = w_total - e_plus
        errs = np.stack([e_plus, e_minus], axis=1)
        errs[~bmask, :] = np.inf
        flat = int(np.argmin(errs))
        i, pol_idx = divmod(flat, 2)
        err = float(errs[i, pol_idx])
        if best is None or err < best[0] - 1e-15:
            thr = 0.5 * (v[i] + v[i + 1])
            best = (err, Stump(f, float(thr), 1 if pol_idx == 0 else -1))
    if best is None:
        raise ValidationError("every feature is constant; no stump can split")
    err, stump = best
    return stump, err / w_total, stump.predict(X)


def _fit_platt(margins, y):
    """Logistic calibration by Newton's method with smoothed targets."""
    n_pos = int((y > 0).sum())
    n_neg = int((y < 0).sum())
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, 0.0
    for _ in range(100):
        p = _sigmoid(a * margins + b)
        g_a = float(((p - t) * margins).sum())
        g_b = float((p - t).sum())
        s = p * (1.0 - p)
        h_aa = float((s * margins * margins).sum()) + 1e-12
        h_ab = float((s * margins).sum())
        h_bb = float(s.sum()) + 1e-12
        det = h_aa * h_bb - h_ab * h_ab
        if abs(det) < 1e-300:
            break
        da = (h_bb * g_a - h_ab * g_b) / det
        db = (h_aa * g_b - h_ab * g_a) / det
        a -= da
        b -= db
        if abs(da) < 1e-12 and abs(db) < 1e-12:
            break
    return max(a, 1e-12), b


@dataclass(frozen=True)
class TrainHistory:
    epsilons: tuple[float, ...]
    alphas: tuple[float, ...]
    exp_losses: tuple[float, ...]


def train_adaboost(
    X, y, rounds: int, return_history: bool = False
):
    """T rounds of discrete AdaBoost with exact stump search.

    Per round: fit the best stump under current weights, weight it by
    alpha = 0.5*ln((1-eps)/eps) with eps clamped to [1e-10, 1-1e-10],
    then reweight and renormalize the samples.  A logistic map from
    margin to [0,1] is fit on the training margins afterwards.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("X must be (N,F) with matching labels")
    if len(X) < 2:
        raise ValidationError("need at least 2 samples")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValidationError("both classes must be present")
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")

    n, n_feat = X.shape
    orders = np.argsort(X, axis=0, kind="stable")
    boundary_masks = []
    for f in range(n_feat):
        v = X[orders[:, f], f]
        bm = np.zeros(n, dtype=bool)
        bm[:-1] = v[:-1] < v[1:]
        boundary_masks.append(bm)

    w = np.full(n, 1.0 / n)
    margins = np.zeros(n)
    stumps = []
    eps_hist, alpha_hist, loss_hist = [], [], []
    for _ in range(rounds):
        stump, eps, pred = _best_stump(X, y, w, orders, boundary_masks)
        eps_c = min(max(eps, 1e-10), 1.0 - 1e-10)
        alpha = 0.5 * math.log((1.0 - eps_c) / eps_c)
        stumps.append((stump, alpha))
        w = w * np.exp(-alpha * y * pred)
        w = w / w.sum()
        margins += alpha * pred
        eps_hist.append(eps)
        alpha_hist.append(alpha)
        loss_hist.append(float(np.mean(np.exp(-y * margins))))

    a, b = _fit_platt(margins, y)
    clf = StrongClassifier(tuple(stumps), a, b)
    if return_history:
        return clf, TrainHistory(tuple(eps_hist), tuple(alpha_hist), tuple(loss_hist))
    return clf


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    extractor: str
    rounds: int
    target_recall: float

    def __post_init__(self):
        if not (0.0 < self.target_recall <= 1.0):
            raise ConfigError(f"target recall must be in (0, 1], got {self.target_recall}")


@dataclass(frozen=True)
class CascadeStage:
    extractor: str
    classifier: StrongClassifier
    reject_threshold: float


def train_cascade(stage_specs, features: dict[str, np.ndarray], y) -> list[CascadeStage]:
    """Train stages sequentially, each on the survivors of the previous
    ones; reject_threshold is the largest value keeping at least the
    target recall on that stage's training positives."""
    y = np.asarray(y, dtype=np.float64)
    if not (y > 0).any():
        raise ConfigError("cascade training data contains no positives")

    stages: list[CascadeStage] = []
    alive = np.ones(len(y), dtype=bool)
    for spec in stage_specs:
        if spec.extractor not in features:
            raise ConfigError(f"no feature matrix for extractor '{spec.extractor}'")
        X_all = np.asarray(features[spec.extractor], dtype=np.float64)
        ys = y[alive]
        if not (ys > 0).any():
            raise ConfigError(
                f"stage '{spec.extractor}': no surviving positives; recall target unreachable"
            )
        if not (ys < 0).any():
            warnings.warn(
                f"stage '{spec.extractor}': no surviving negatives; "
                "training against the original negative pool, threshold 0.5"
            )
            neg = y < 0
            X_train = np.vstack([X_all[alive], X_all[neg]])
            y_train = np.concatenate([ys, y[neg]])
            clf = train_adaboost(X_train, y_train, spec.rounds)
            thr = 0.5
        else:
            clf = train_adaboost(X_all[alive], ys, spec.rounds)
            pos_scores = score_batch(clf, X_all[alive][ys > 0])
            n_keep = int(math.ceil(spec.target_recall * len(pos_scores)))
            thr = float(np.sort(pos_scores)[::-1][n_keep - 1])
        scores_alive = score_batch(clf, X_all[alive])
        next_alive = alive.copy()
        next_alive[alive] = scores_alive >= thr
        alive = next_alive
        stages.append(CascadeStage(spec.extractor, clf, thr))
    return stages


def apply_cascade(stages, feats) -> tuple[bool, float]:
    """Short-circuit at the first stage whose score falls below its
    reject threshold.  Returns (accepted, last computed stage score)."""
    s = 0.5
    for stage in stages:
        s = score(stage.classifier, feats[stage.extractor])
        if s < stage.reject_threshold:
            return False, s
    return True, s


def apply_cascade_batch(stages, feats) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Vectorized cascade over feature matrices keyed by extractor.

    Returns (accepted mask, final scores, survivor count after each stage).
    Stages are only evaluated on candidates still alive.
    """
    first = feats[stages[0].extractor] if stages else None
    n = len(first) if first is not None else 0
    alive = np.ones(n, dtype=bool)
    final = np.full(n, 0.5)
    counts = []
    for stage in stages:
        X = np.asarray(feats[stage.extractor], dtype=np.float64)
        idx = np.nonzero(alive)[0]
        if len(idx):
            s = score_batch(stage.classifier, X[idx])
            final[idx] = s
            alive[idx] = s >= stage.reject_threshold
        counts.append(int(alive.sum()))
    return alive, final, counts
