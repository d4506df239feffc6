"""MC-dropout sampling, predictive statistics and two-member ensembling."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .metrics import roc_auc
from .numerics import ops
from .numerics.tensor import derive_seed, split_rngs


@dataclass(frozen=True)
class McConfig:
    samples: int = 50
    seed: int = 0

    def validate(self):
        if self.samples < 2:
            raise ConfigError(f"MC sample count must be >= 2, got {self.samples}")


@dataclass
class PredictiveMap:
    mean: np.ndarray
    std: np.ndarray
    samples: int


def _chunks(n, size):
    for s in range(0, n, size):
        yield s, min(n, s + size)


def mc_predict(model, x, cfg=McConfig(), logits=False, batch=64):
    """Stack of ``cfg.samples`` stochastic forward passes over one input.

    Pass ``t`` draws its dropout masks from the ``t``-th stream split off
    ``cfg.seed``, so the stack does not depend on ``batch``.
    Returns an array of shape ``(T, *output_shape)``.
    """
    cfg.validate()
    if getattr(model, "dropout_sites", 1) < 1:
        raise ConfigError("MC prediction needs a model with at least one dropout site")
    x = np.asarray(x)
    rngs = split_rngs(cfg.seed, cfg.samples)
    out = []
    with ops.inference():
        for s, e in _chunks(cfg.samples, batch):
            xb = np.broadcast_to(x, (e - s,) + x.shape)
            z = model.forward(np.ascontiguousarray(xb), "mc", rngs[s:e])
            out.append(z if logits else ops.sigmoid(z))
    return np.concatenate(out, axis=0)


def mc_predict_many(model, xs, cfg=McConfig(), keys=None, batch=256):
    """MC stacks for many inputs at once; returns ``(N, T, ...)`` probabilities.

    Input ``i`` uses seed ``derive_seed(cfg.seed, keys[i])`` (default key is
    the index), which matches ``mc_predict`` called with that seed.
    """
    cfg.validate()
    xs = np.asarray(xs)
    n, T = xs.shape[0], cfg.samples
    keys = range(n) if keys is None else keys
    rngs = []
    for k in keys:
        k = k if isinstance(k, tuple) else (k,)
        rngs += split_rngs(derive_seed(cfg.seed, *k), T)
    flat_out = []
    with ops.inference():
        for s, e in _chunks(n * T, batch):
            idx = np.arange(s, e) // T
            flat_out.append(ops.sigmoid(model.forward(xs[idx], "mc", rngs[s:e])))
    flat = np.concatenate(flat_out, axis=0)
    return flat.reshape((n, T) + flat.shape[1:])


def predict_eval(model, xs, batch=256):
    """Deterministic (dropout off) probabilities for a batch of inputs."""
    xs = np.asarray(xs)
    out = []
    with ops.inference():
        for s, e in _chunks(xs.shape[0], batch):
            out.append(ops.sigmoid(model.forward(xs[s:e], "eval")))
    return np.concatenate(out, axis=0)


def predictive_stats(samples, axis=0):
    """Elementwise mean and population (1/T) standard deviation."""
    samples = np.asarray(samples, dtype=np.float64)
    T = samples.shape[axis]
    if T < 2:
        raise ConfigError("predictive statistics need at least two samples")
    mean = samples.mean(axis=axis)
    std = np.sqrt(np.mean((samples - np.expand_dims(mean, axis)) ** 2, axis=axis))
    return PredictiveMap(mean, std, T)


def _check_unit(name, v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1) or np.any(~np.isfinite(v)):
        raise DataError(f"{name} must lie in [0, 1]")
    return v


def ensemble_combine(y1, y2, alpha=0.5):
    y1 = _check_unit("y1", y1)
    y2 = _check_unit("y2", y2)
    _check_unit("alpha", alpha)
    return alpha * y1 + (1.0 - alpha) * y2


def ensemble_variance(v1, v2, alpha=0.5):
    """Variance of the convex combination of two independent predictions."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if np.any(v1 < 0) or np.any(v2 < 0):
        raise DataError("variances must be non-negative")
    _check_unit("alpha", alpha)
    return alpha ** 2 * v1 + (1.0 - alpha) ** 2 * v2


def average_uncertainty(sigmas):
    s = np.asarray(sigmas, dtype=np.float64).ravel()
    if s.size == 0:
        raise DataError("average uncertainty of an empty candidate list")
    return float(s.mean())


def alpha_grid(step=0.05):
    n = int(round(1.0 / step))
    return np.round(np.linspace(0.0, 1.0, n + 1), 10)


def sweep_aucs(preds1, preds2, labels, grid=None):
    """ROC-AUC of the convex combination at each grid weight."""
    grid = alpha_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    p1 = _check_unit("preds1", preds1)
    p2 = _check_unit("preds2", preds2)
    y = np.asarray(labels)
    if p1.shape != p2.shape or p1.shape != y.shape:
        raise DataError("prediction and label arrays must share a length")
    if y.size == 0 or y.min() == y.max():
        raise DataError("alpha sweep needs both classes in the labels")
    return {float(a): roc_auc(ensemble_combine(p1, p2, a), y)[1] for a in grid}


def alpha_sweep(preds1, preds2, labels, grid=None):
    """Grid search for the ensemble weight maximizing ROC-AUC.

    Ties go to the weight nearest 0.5, then to the smaller weight.
    Returns ``(alpha, auc_at_alpha)``.
    """
    aucs = sweep_aucs(preds1, preds2, labels, grid)
    best = max(aucs.values())
    tied = [a for a, v in aucs.items() if v >= best - 1e-12]
    alpha = min(tied, key=lambda a: (abs(a - 0.5), a))
    return alpha, aucs[alpha]
