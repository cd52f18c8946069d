"""Decision thresholds, temperature scaling, and the evaluation metric suite.

Thresholds maximize per-class F1 on a validation grid; temperatures
minimize validation NLL via golden-section search. The metric suite covers
macro/micro/weighted F1, Hamming loss, expected/maximum calibration error,
Brier score, and label co-occurrence counts.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .core import NUM_MOVES
from .validation import (
    check_binary_matrix,
    check_matching_lengths,
    check_probabilities,
    check_seed_rng,
)

logger = logging.getLogger(__name__)

THRESHOLD_GRID = np.round(np.arange(5, 96) * 0.01, 2)  # 0.05 .. 0.95 step 0.01
DEFAULT_BINS = 15
TEMPERATURE_BOUNDS = (0.05, 20.0)


# ---------------------------------------------------------------------------
# Thresholds
# ---------------------------------------------------------------------------


def _f1_from_counts(tp: float, fp: float, fn: float) -> float:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def tune_thresholds(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-class decision thresholds maximizing validation F1.

    Scans the 0.05..0.95 grid (step 0.01) for each class; ties resolve to
    the smallest threshold. Classes without validation positives fall back
    to 0.5 with a warning.
    """
    probs = check_probabilities(probs)
    targets = check_binary_matrix(targets, probs.shape[1])
    check_matching_lengths(probs, targets)
    n_classes = probs.shape[1]
    thresholds = np.empty(n_classes)
    for c in range(n_classes):
        y = targets[:, c]
        if y.sum() == 0:
            logger.warning("class %d has no validation positives; threshold defaults to 0.5", c)
            thresholds[c] = 0.5
            continue
        p = probs[:, c]
        best_tau, best_f1 = THRESHOLD_GRID[0], -1.0
        for tau in THRESHOLD_GRID:
            pred = p >= tau
            tp = float(np.sum(pred & (y > 0)))
            fp = float(np.sum(pred & (y == 0)))
            fn = float(np.sum(~pred & (y > 0)))
            f1 = _f1_from_counts(tp, fp, fn)
            if f1 > best_f1:
                best_f1, best_tau = f1, tau
        thresholds[c] = best_tau
    return thresholds


class ThresholdCalibrator(BaseEstimator):
    """Estimator wrapper: fit thresholds on validation, transform to labels."""

    def fit(self, probs, targets):
        self.thresholds_ = tune_thresholds(probs, targets)
        return self

    def transform(self, probs) -> np.ndarray:
        probs = check_probabilities(probs, len(self.thresholds_))
        return (probs >= self.thresholds_).astype(int)


# ---------------------------------------------------------------------------
# Temperature scaling
# ---------------------------------------------------------------------------


def _golden_section(fn, lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200):
    """Minimize a unimodal function on [lo, hi]; returns (x, converged)."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a < tol:
            return 0.5 * (a + b), True
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b), (b - a) < tol


def _sigmoid_nll(logits: np.ndarray, targets: np.ndarray) -> float:
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return float(np.mean(softplus - targets * logits))


def _softmax_nll(logits: np.ndarray, classes: np.ndarray) -> float:
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(classes)), classes]))


def scale_temperatures(
    move_logits: np.ndarray,
    move_targets: np.ndarray,
    blade_logits: np.ndarray | None = None,
    blade_targets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit per-class temperatures minimizing validation NLL.

    Move logits get one temperature per sigmoid class (independent 1-D
    searches); blade logits get one temperature per softmax column, fit by
    two passes of coordinate-wise golden-section search. Dividing logits by
    these temperatures calibrates the probabilities without changing any
    per-class ranking. A failed search falls back to T = 1.
    """
    move_logits = np.asarray(move_logits, dtype=np.float64)
    move_targets = check_binary_matrix(move_targets, move_logits.shape[1])
    move_temps = np.ones(move_logits.shape[1])
    for c in range(move_logits.shape[1]):
        z, y = move_logits[:, c], move_targets[:, c]
        t, converged = _golden_section(lambda t: _sigmoid_nll(z / t, y), *TEMPERATURE_BOUNDS)
        move_temps[c] = t if converged else 1.0

    if blade_logits is None:
        return move_temps, np.ones(0)
    blade_logits = np.asarray(blade_logits, dtype=np.float64)
    classes = np.asarray(blade_targets, dtype=int)
    blade_temps = np.ones(blade_logits.shape[1])
    for _ in range(2):
        for c in range(blade_logits.shape[1]):
            def nll_at(t: float, c=c) -> float:
                temps = np.array(blade_temps)
                temps[c] = t
                return _softmax_nll(blade_logits / temps, classes)

            t, converged = _golden_section(nll_at, *TEMPERATURE_BOUNDS)
            blade_temps[c] = t if converged else 1.0
    return move_temps, blade_temps


def apply_move_temperatures(logits: np.ndarray, temperatures: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperatures
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def apply_blade_temperatures(logits: np.ndarray, temperatures: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperatures
    ez = np.exp(z - z.max(axis=-1, keepdims=True))
    return ez / ez.sum(axis=-1, keepdims=True)


class TemperatureCalibrator(BaseEstimator):
    """Estimator wrapper: fit temperatures on cached validation logits."""

    def fit(self, move_logits, move_targets, blade_logits=None, blade_targets=None):
        self.move_temperatures_, self.blade_temperatures_ = scale_temperatures(
            move_logits, move_targets, blade_logits, blade_targets
        )
        return self

    def transform(self, move_logits, blade_logits=None):
        moves = apply_move_temperatures(move_logits, self.move_temperatures_)
        if blade_logits is None:
            return moves
        return moves, apply_blade_temperatures(blade_logits, self.blade_temperatures_)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    macro_f1: float
    micro_f1: float
    weighted_f1: float
    hamming: float
    ece: float
    mce: float
    brier: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray

    def to_text(self) -> str:
        lines = [
            f"macro_f1     {self.macro_f1:.4f}",
            f"micro_f1     {self.micro_f1:.4f}",
            f"weighted_f1  {self.weighted_f1:.4f}",
            f"hamming      {self.hamming:.4f}",
            f"ece          {self.ece:.4f}",
            f"mce          {self.mce:.4f}",
            f"brier        {self.brier:.4f}",
            "",
            "class  precision  recall  f1",
        ]
        for c in range(len(self.per_class_f1)):
            lines.append(
                f"{c:>5}  {self.per_class_precision[c]:>9.4f}  "
                f"{self.per_class_recall[c]:>6.4f}  {self.per_class_f1[c]:.4f}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "value"])
        for name in ("macro_f1", "micro_f1", "weighted_f1", "hamming", "ece", "mce", "brier"):
            writer.writerow([name, repr(getattr(self, name))])
        writer.writerow([])
        writer.writerow(["class", "precision", "recall", "f1"])
        for c in range(len(self.per_class_f1)):
            writer.writerow(
                [c, repr(self.per_class_precision[c]), repr(self.per_class_recall[c]),
                 repr(self.per_class_f1[c])]
            )
        return buf.getvalue()


@dataclass(frozen=True)
class ClassificationMetrics:
    macro_f1: float
    micro_f1: float
    weighted_f1: float
    hamming: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray


def compute_classification(
    predictions: np.ndarray, targets: np.ndarray, classes: np.ndarray | None = None
) -> ClassificationMetrics:
    """Multi-label F1 family plus Hamming loss over binary matrices.

    ``classes`` optionally restricts scoring to a column subset (e.g. the
    classes actually present in a reduced corpus); by default every column
    counts, and a class absent from both predictions and targets
    contributes F1 = 0 to the macro average.
    """
    predictions = check_binary_matrix(predictions, name="predictions")
    targets = check_binary_matrix(targets, predictions.shape[1])
    check_matching_lengths(predictions, targets)
    if predictions.shape[0] == 0:
        raise ValueError("cannot score an empty prediction set")
    if classes is not None:
        predictions = predictions[:, classes]
        targets = targets[:, classes]
    tp = np.sum((predictions > 0) & (targets > 0), axis=0).astype(float)
    fp = np.sum((predictions > 0) & (targets == 0), axis=0).astype(float)
    fn = np.sum((predictions == 0) & (targets > 0), axis=0).astype(float)

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)

    macro = float(f1.mean())
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / denom) if denom > 0 else 0.0
    support = targets.sum(axis=0)
    weighted = float((f1 * support).sum() / support.sum()) if support.sum() > 0 else 0.0
    hamming = float(np.mean(predictions != targets))
    return ClassificationMetrics(macro, micro, weighted, hamming, precision, recall, f1)


# ---------------------------------------------------------------------------
# Calibration metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationMetrics:
    ece: float
    mce: float
    brier: float


def compute_calibration(probs: np.ndarray, targets: np.ndarray, bins: int = DEFAULT_BINS) -> CalibrationMetrics:
    """ECE/MCE over equal-width confidence bins plus the Brier score.

    Every (sample, class) probability is one binary-outcome entry. Bin m
    covers [m/M, (m+1)/M), with 1.0 assigned to the last bin. ECE weights
    each bin's |accuracy - confidence| gap by occupancy; MCE takes the
    maximum gap; Brier is the mean squared error over all entries.
    """
    probs = check_probabilities(np.atleast_2d(probs))
    targets = check_binary_matrix(np.atleast_2d(targets), probs.shape[1])
    check_matching_lengths(probs, targets)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    flat_p = probs.reshape(-1)
    flat_y = targets.reshape(-1)
    idx = np.minimum((flat_p * bins).astype(int), bins - 1)
    ece = 0.0
    mce = 0.0
    n = flat_p.size
    for m in range(bins):
        members = idx == m
        count = int(members.sum())
        if count == 0:
            continue
        acc = float(flat_y[members].mean())
        conf = float(flat_p[members].mean())
        gap = abs(acc - conf)
        ece += (count / n) * gap
        mce = max(mce, gap)
    brier = float(np.mean((flat_y - flat_p) ** 2))
    return CalibrationMetrics(ece, mce, brier)


def build_report(
    predictions: np.ndarray,
    targets: np.ndarray,
    probs: np.ndarray,
    bins: int = DEFAULT_BINS,
    classes: np.ndarray | None = None,
) -> MetricsReport:
    cls = compute_classification(predictions, targets, classes)
    cal = compute_calibration(probs, targets, bins)
    return MetricsReport(
        cls.macro_f1, cls.micro_f1, cls.weighted_f1, cls.hamming,
        cal.ece, cal.mce, cal.brier,
        cls.per_class_precision, cls.per_class_recall, cls.per_class_f1,
    )


# ---------------------------------------------------------------------------
# Co-occurrence
# ---------------------------------------------------------------------------


def cooccurrence(label_sets: np.ndarray, num_classes: int = NUM_MOVES) -> np.ndarray:
    """Symmetric counts of jointly active labels.

    The diagonal counts activations per class; off-diagonal [i, j] counts
    examples where i and j were active together.
    """
    labels = check_binary_matrix(label_sets, num_classes, name="label_sets")
    counts = np.zeros((num_classes, num_classes), dtype=int)
    for row in labels:
        active = np.flatnonzero(row)
        for i in active:
            counts[i, i] += 1
        for a in range(len(active)):
            for b in range(a + 1, len(active)):
                counts[active[a], active[b]] += 1
                counts[active[b], active[a]] += 1
    return counts


def cooccurrence_csv(matrix: np.ndarray, class_names: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([""] + class_names)
    for name, row in zip(class_names, matrix):
        writer.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------


def kfold_split(clip_ids, seed: int, n_folds: int = 5) -> list[tuple[list, list, list]]:
    """Five 80/10/10 folds split at clip level.

    Clips shuffle once, then divide into ten deciles; fold k takes decile
    2k as validation and decile 2k+1 as test, with the remaining 80% for
    training. Test deciles are pairwise disjoint across folds, both sides
    of a clip always travel together, and a fixed seed reproduces the
    folds exactly.
    """
    unique = sorted(set(clip_ids))
    if len(unique) < 2 * n_folds:
        raise ValueError(f"need at least {2 * n_folds} clips, got {len(unique)}")
    rng = check_seed_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    deciles = [list(part) for part in np.array_split(np.array(order, dtype=object), 2 * n_folds)]
    folds = []
    for k in range(n_folds):
        val = deciles[2 * k]
        test = deciles[2 * k + 1]
        train = [c for i, d in enumerate(deciles) if i not in (2 * k, 2 * k + 1) for c in d]
        folds.append((train, val, test))
    return folds
