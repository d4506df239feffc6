"""Stateful layer wrappers around the primitives in :mod:`ops`.

A layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""

import math

import numpy as np

from . import ops


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, mode="eval", rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv(Layer):
    """Zero-padded convolution; ``pad=None`` means 'same' for odd kernels."""

    def __init__(self, in_ch, out_ch, kernel=3, dims=2, pad=None, rng=None, dtype=np.float32):
        super().__init__()
        self.kind = f"conv{dims}d"
        self.in_ch, self.out_ch, self.kernel, self.dims = in_ch, out_ch, kernel, dims
        self.pad = (kernel - 1) // 2 if pad is None else pad
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_ch * kernel ** dims
        shape = (out_ch, in_ch) + (kernel,) * dims
        self.params["w"] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.conv_forward(x, self.params["w"], self.params["b"], 1, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = ops.conv_backward(dout, self._cache)
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx

    def __repr__(self):
        return f"Conv{self.dims}d({self.in_ch}->{self.out_ch}, k={self.kernel})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, gain=2.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["w"] = (rng.standard_normal((n_out, n_in)) * math.sqrt(gain / n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.dense_forward(x, self.params["w"], self.params["b"])
        return out

    def backward(self, dout):
        dx, dw, db = ops.dense_backward(dout, self._cache)
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._cache)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.dropout_forward(x, self.p, rng, mode)
        return out

    def backward(self, dout):
        return ops.dropout_backward(dout, self._cache)

    def __repr__(self):
        return f"Dropout(p={self.p})"


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window=2, dims=2):
        super().__init__()
        self.window, self.dims = window, dims

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.max_pool_forward(x, self.window, self.window, self.dims)
        return out

    def backward(self, dout):
        return ops.max_pool_backward(dout, self._cache)


class Upsample(Layer):
    kind = "upsample"

    def __init__(self, factor=2, dims=2):
        super().__init__()
        self.factor, self.dims = factor, dims

    def forward(self, x, mode="eval", rng=None):
        out, self._cache = ops.upsample_nn_forward(x, self.factor, self.dims)
        return out

    def backward(self, dout):
        return ops.upsample_nn_backward(dout, self._cache)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode="eval", rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, mode="eval", rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self
