"""Central finite-difference gradient checking."""

import numpy as np

from .ops import inference


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def grad_check(loss_and_grads, arrays, eps=1e-5, loss=None):
    """Max relative error between analytic and numeric gradients.

    ``loss_and_grads()`` evaluates the loss at the current contents of
    ``arrays`` (a dict of float64 arrays, mutated in place during checking)
    and returns ``(loss, {name: grad})``. The function must be deterministic.
    ``loss()``, if given, is a cheaper forward-only evaluation used for the
    finite differences.
    """
    loss = loss or (lambda: loss_and_grads()[0])
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    worst = 0.0
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays, {name!r} is {arr.dtype}")
        num = numeric_grad(loss, arr, eps)
        worst = max(worst, relative_error(analytic[name], num))
    return worst


def check_layer(layer, x, rng=None, eps=1e-5, mode="eval", seed=0):
    """Grad-check a layer against the probe loss ``sum(out * r)``.

    Checks the gradient with respect to the input and every parameter.
    When ``mode`` uses dropout, the same mask seed is replayed each call.
    """
    rng = np.random.default_rng(1234) if rng is None else rng
    x = np.array(x, dtype=np.float64)
    layer.astype(np.float64)
    probe = rng.standard_normal(layer.forward(x, mode, np.random.default_rng(seed)).shape)

    def value():
        with inference():
            return float(np.sum(layer.forward(x, mode, np.random.default_rng(seed)) * probe))

    def fn():
        layer.zero_grad()
        out = layer.forward(x, mode, np.random.default_rng(seed))
        dx = layer.backward(probe)
        grads = {"x": dx}
        grads.update({f"p:{k}": v for k, v in _all_grads(layer).items()})
        return float(np.sum(out * probe)), grads

    arrays = {"x": x}
    arrays.update({f"p:{k}": v for k, v in _all_params(layer).items()})
    return grad_check(fn, arrays, eps, value)


def _all_params(layer):
    if hasattr(layer, "named_params"):
        return layer.named_params()
    if hasattr(layer, "layers"):
        out = {}
        for i, sub in enumerate(layer.layers):
            out.update({f"{i}.{k}": v for k, v in _all_params(sub).items()})
        return out
    return dict(layer.params)


def _all_grads(layer):
    if hasattr(layer, "named_grads"):
        return layer.named_grads()
    if hasattr(layer, "layers"):
        out = {}
        for i, sub in enumerate(layer.layers):
            out.update({f"{i}.{k}": v for k, v in _all_grads(sub).items()})
        return out
    return dict(layer.grads)
