"""Evaluation statistics: ROC/PR curves, class-balanced Brier, Spearman, Dice."""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError


def _scored(scores, labels, need_both=True):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores but {y.size} labels")
    if s.size < 2:
        raise DataError("need at least two scored items")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0/1")
    y = y.astype(np.int64)
    if need_both and (y.min() == y.max()):
        raise DataError("both classes must be present")
    return s, y


def _grouped_counts(s, y):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_curve(scores, labels):
    """Returns ``(thresholds, fpr, tpr)`` starting at the (0, 0) corner."""
    s, y = _scored(scores, labels)
    thr, tp, fp = _grouped_counts(s, y)
    P, N = y.sum(), y.size - y.sum()
    return np.r_[np.inf, thr], np.r_[0.0, fp / N], np.r_[0.0, tp / P]


def roc_auc(scores, labels):
    """Returns ``((thresholds, fpr, tpr), auc)``; ties contribute half a pair."""
    curve = roc_curve(scores, labels)
    _, fpr, tpr = curve
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return curve, auc


def pr_curve(scores, labels):
    """Returns ``(thresholds, recall, precision)`` over tied-score groups."""
    s, y = _scored(scores, labels, need_both=False)
    P = y.sum()
    if P == 0:
        raise DataError("precision-recall needs at least one positive")
    thr, tp, fp = _grouped_counts(s, y)
    return thr, tp / P, tp / (tp + fp)


def pr_auc(scores, labels):
    """Step-wise average precision: sum of (R_k - R_{k-1}) * P_k."""
    curve = pr_curve(scores, labels)
    _, rec, prec = curve
    ap = float(np.sum(np.diff(np.r_[0.0, rec]) * prec))
    return curve, ap


def weighted_brier(scores, labels):
    """Mean of the per-class Brier scores (each class weighted one half)."""
    p, y = _scored(scores, labels)
    pos = y == 1
    return float(0.5 * (np.mean((1.0 - p[pos]) ** 2) + np.mean(p[~pos] ** 2)))


def brier(scores, labels):
    p, y = _scored(scores, labels, need_both=False)
    return float(np.mean((p - y) ** 2))


def _rho_from_ranks(rx, ry):
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def spearman(x, y, method="auto"):
    """Spearman rank correlation ``(rho, p)``.

    Ties receive average ranks. ``method`` selects the two-sided p-value:
    ``"t"`` uses the Student-t approximation with n-2 dof, ``"exact"``
    enumerates every permutation of ``y`` (n <= 8), and ``"auto"`` picks
    exact for n <= 8.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if y.size != n:
        raise DataError("spearman needs equal-length inputs")
    if n < 3:
        raise DataError("spearman needs at least three points")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise DataError("spearman undefined: an input has zero rank variance")
    rho = _rho_from_ranks(rx, ry)
    if method == "auto":
        method = "exact" if n <= 8 else "t"
    if method == "exact":
        if n > 8:
            raise DataError("exact permutation p-value limited to n <= 8")
        hits = total = 0
        for perm in itertools.permutations(ry):
            total += 1
            if abs(_rho_from_ranks(rx, np.asarray(perm))) >= abs(rho) - 1e-12:
                hits += 1
        return rho, hits / total
    if method != "t":
        raise DataError(f"unknown spearman method {method!r}")
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


def dice(pred, truth):
    """Dice overlap of two binary masks; ``nan`` when both are empty."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return float("nan")
    return float(2.0 * np.logical_and(a, b).sum() / denom)


@dataclass
class ModelScores:
    """Metrics for one model row of the evaluation table."""

    name: str
    roc_auc: float
    pr_auc: float
    brier: float
    avg_sigma: float = float("nan")
    roc: tuple = field(default=None, repr=False)
    pr: tuple = field(default=None, repr=False)


def score_model(name, scores, labels, sigmas=None):
    roc, auc = roc_auc(scores, labels)
    pr, ap = pr_auc(scores, labels)
    avg = float(np.mean(sigmas)) if sigmas is not None else float("nan")
    return ModelScores(name, auc, ap, weighted_brier(scores, labels), avg, roc, pr)
