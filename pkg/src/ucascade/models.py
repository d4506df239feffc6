"""Bayesian 2-d segmentation U-Net, 3-d detection CNN, and checkpoint IO."""

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import ops
from .numerics.layers import Conv, Dense, Dropout, Flatten, MaxPool, ReLU, Sequential, Upsample

CHECKPOINT_MAGIC = b"UCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    input_size: int = 64
    base_channels: int = 8
    depth: int = 2
    dropout: float = 0.5
    kernel: int = 3

    def validate(self):
        n = self.input_size
        if n < 1 or n & (n - 1):
            raise ConfigError(f"segmentation input size must be a power of two, got {n}")
        if n < 4 * 2 ** self.depth:
            raise ConfigError(f"input size {n} too small for depth {self.depth} (need >= {4 * 2 ** self.depth})")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel must be odd for same padding")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class DetectNetConfig:
    cube_edge: int = 16
    in_channels: int = 1
    conv_channels: tuple = (8, 16, 32)
    hidden: int = 64
    dropout: float = 0.5
    kernel: int = 3

    def validate(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"detector input channels must be 1 or 3, got {self.in_channels}")
        if self.cube_edge % 8 or self.cube_edge <= 0:
            raise ConfigError(f"cube edge must be a positive multiple of 8, got {self.cube_edge}")
        if len(self.conv_channels) != 3:
            raise ConfigError("detector has exactly three conv layers")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


def _conv_block(cin, cout, k, dims, p, rng, dtype):
    return [Conv(cin, cout, k, dims, rng=rng, dtype=dtype), ReLU(), Dropout(p)]


class Model:
    """Common parameter-store plumbing for the two networks."""

    kind = "model"

    def named_layers(self):
        raise NotImplementedError

    def named_params(self):
        return {f"{n}.{k}": v for n, layer in self.named_layers() for k, v in layer.params.items()}

    def named_grads(self):
        return {f"{n}.{k}": v for n, layer in self.named_layers() for k, v in layer.grads.items()}

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def load_params(self, tensors):
        own = self.named_params()
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise ShapeMismatchError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, arr in tensors.items():
            if own[name].shape != arr.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
        for n, layer in self.named_layers():
            for k in layer.params:
                layer.params[k] = np.array(tensors[f"{n}.{k}"], dtype=self.dtype)
        self.zero_grad()

    def param_count(self):
        return sum(v.size for v in self.named_params().values())

    @property
    def dropout_sites(self):
        return sum(1 for _, layer in self.named_layers() if isinstance(layer, Dropout))

    def predict(self, x, mode="eval", rng=None):
        return ops.sigmoid(self.forward(x, mode, rng))


class SegUNet(Model):
    """U-Net mapping ``[N, 1, H, W]`` slices to per-pixel logits.

    Two 3x3 convs per encoder level, two at the bottleneck and two per decoder
    level, each followed by ReLU and dropout; decoder levels concatenate the
    upsampled features with the matching encoder features. A 1x1 conv
    produces the logit.
    """

    kind = "seg_unet"

    def __init__(self, cfg=SegNetConfig(), seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, k, p, d = cfg.base_channels, cfg.kernel, cfg.dropout, cfg.depth
        self.enc = []
        cin = 1
        for i in range(d):
            cout = c * 2 ** i
            self.enc.append(Sequential(_conv_block(cin, cout, k, 2, p, rng, dtype) + _conv_block(cout, cout, k, 2, p, rng, dtype)))
            cin = cout
        cb = c * 2 ** d
        self.bottleneck = Sequential(_conv_block(cin, cb, k, 2, p, rng, dtype) + _conv_block(cb, cb, k, 2, p, rng, dtype))
        self.pools = [MaxPool(2, 2) for _ in range(d)]
        self.ups = [Upsample(2, 2) for _ in range(d)]
        self.dec = []
        cin = cb
        for i in reversed(range(d)):
            cout = c * 2 ** i
            self.dec.append(Sequential(_conv_block(cin + cout, cout, k, 2, p, rng, dtype) + _conv_block(cout, cout, k, 2, p, rng, dtype)))
            cin = cout
        self.head = Conv(c, 1, 1, 2, pad=0, rng=rng, dtype=dtype)
        self._skip_channels = None

    def named_layers(self):
        out = []
        for i, blk in enumerate(self.enc):
            out += [(f"enc{i}.{j}", layer) for j, layer in enumerate(blk.layers) if layer.params]
        out += [(f"mid.{j}", layer) for j, layer in enumerate(self.bottleneck.layers) if layer.params]
        for i, blk in enumerate(self.dec):
            out += [(f"dec{i}.{j}", layer) for j, layer in enumerate(blk.layers) if layer.params]
        out.append(("head", self.head))
        return out

    def conv_layers(self):
        return [layer for _, layer in self.named_layers() if isinstance(layer, Conv) and layer is not self.head]

    def layers_for_roster(self):
        convs = ["conv2d"] * len(self.conv_layers())
        return convs + ["conv2d_1x1"]

    def named_dropouts(self):
        blocks = self.enc + [self.bottleneck] + self.dec
        return [layer for blk in blocks for layer in blk.layers if isinstance(layer, Dropout)]

    @property
    def dropout_sites(self):
        return len(self.named_dropouts())

    def forward(self, x, mode="eval", rng=None):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigError(f"segmentation input must be [N, 1, H, W], got {x.shape}")
        if x.shape[2] % 2 ** self.cfg.depth or x.shape[3] % 2 ** self.cfg.depth:
            raise ConfigError(f"spatial extents {x.shape[2:]} not divisible by {2 ** self.cfg.depth}")
        x = x.astype(self.dtype, copy=False)
        skips = []
        for blk, pool in zip(self.enc, self.pools):
            x = blk.forward(x, mode, rng)
            skips.append(x)
            x = pool.forward(x)
        x = self.bottleneck.forward(x, mode, rng)
        self._skip_channels = []
        for blk, up, skip in zip(self.dec, self.ups, reversed(skips)):
            x = up.forward(x)
            self._skip_channels.append(x.shape[1])
            x = np.concatenate([x, skip], axis=1)
            x = blk.forward(x, mode, rng)
        return self.head.forward(x)

    def backward(self, dlogits):
        g = self.head.backward(dlogits.astype(self.dtype, copy=False))
        dskips = []
        for blk, up, cu in zip(reversed(self.dec), reversed(self.ups), reversed(self._skip_channels)):
            g = blk.backward(g)
            dskips.append(g[:, cu:])
            g = up.backward(g[:, :cu])
        g = self.bottleneck.backward(g)
        for blk, pool, ds in zip(reversed(self.enc), reversed(self.pools), reversed(dskips)):
            g = pool.backward(g) + ds
            g = blk.backward(g)
        return g


class DetectCNN(Model):
    """Three 3-d conv layers (each with ReLU, dropout, 2x max-pool) and two dense layers."""

    kind = "detect_cnn"

    def __init__(self, cfg=DetectNetConfig(), seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers = []
        cin = cfg.in_channels
        for cout in cfg.conv_channels:
            layers += [Conv(cin, cout, cfg.kernel, 3, rng=rng, dtype=dtype), ReLU(), Dropout(cfg.dropout), MaxPool(2, 3)]
            cin = cout
        flat = cin * (cfg.cube_edge // 8) ** 3
        layers += [Flatten(), Dense(flat, cfg.hidden, rng=rng, dtype=dtype), ReLU(), Dropout(cfg.dropout),
                   Dense(cfg.hidden, 1, rng=rng, dtype=dtype, gain=1.0)]
        self.net = Sequential(layers)

    def named_layers(self):
        return [(f"l{j}", layer) for j, layer in enumerate(self.net.layers) if layer.params]

    def layers_for_roster(self):
        return [layer.kind for _, layer in self.named_layers()]

    @property
    def dropout_sites(self):
        return sum(isinstance(layer, Dropout) for layer in self.net.layers)

    def forward(self, x, mode="eval", rng=None):
        e, c = self.cfg.cube_edge, self.cfg.in_channels
        if x.ndim != 5 or x.shape[1:] != (c, e, e, e):
            raise ConfigError(f"detector input must be [N, {c}, {e}, {e}, {e}], got {x.shape}")
        return self.net.forward(x.astype(self.dtype, copy=False), mode, rng)[:, 0]

    def backward(self, dlogits):
        return self.net.backward(dlogits.astype(self.dtype, copy=False)[:, None])


def build_seg_unet(cfg=SegNetConfig(), seed=0, dtype=np.float32):
    return SegUNet(cfg, seed, dtype)


def build_detect_cnn(cfg=DetectNetConfig(), seed=0, dtype=np.float32):
    return DetectCNN(cfg, seed, dtype)


def seg_param_count(cfg):
    """Closed-form parameter count of :class:`SegUNet`."""
    c, k, d = cfg.base_channels, cfg.kernel, cfg.depth
    conv = lambda i, o, kk: i * o * kk * kk + o  # noqa: E731
    total, cin = 0, 1
    for i in range(d):
        cout = c * 2 ** i
        total += conv(cin, cout, k) + conv(cout, cout, k)
        cin = cout
    cb = c * 2 ** d
    total += conv(cin, cb, k) + conv(cb, cb, k)
    cin = cb
    for i in reversed(range(d)):
        cout = c * 2 ** i
        total += conv(cin + cout, cout, k) + conv(cout, cout, k)
        cin = cout
    return total + conv(c, 1, 1)


# ----------------------------------------------------------------- checkpoints

class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _config_dict(model):
    cfg = asdict(model.cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def _build_from_header(header):
    kind = header.get("kind")
    cfg = header.get("config", {})
    if kind == SegUNet.kind:
        return SegUNet(SegNetConfig(**cfg))
    if kind == DetectCNN.kind:
        cfg = dict(cfg)
        cfg["conv_channels"] = tuple(cfg.get("conv_channels", (8, 16, 32)))
        return DetectCNN(DetectNetConfig(**cfg))
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model, path, meta=None):
    header = {"kind": model.kind, "config": _config_dict(model), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.named_params()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count):
        return struct.unpack(f"<{count}I", self.take(4 * count))


def read_checkpoint(path):
    """Parse a checkpoint file into ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.data[:4]
    if len(magic) < 4:
        raise TruncatedCheckpointError("checkpoint shorter than its magic bytes")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    r.pos = 4
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed config echo: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32s(rank))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return header, tensors


def load_checkpoint(path, expect=None):
    """Rebuild the model stored at ``path``.

    ``expect`` may be a config (or model) the caller requires; loading a
    checkpoint whose tensors do not fit it raises :class:`ShapeMismatchError`.
    """
    header, tensors = read_checkpoint(path)
    if expect is not None:
        if isinstance(expect, Model):
            model = type(expect)(expect.cfg)
        elif isinstance(expect, SegNetConfig):
            model = SegUNet(expect)
        elif isinstance(expect, DetectNetConfig):
            model = DetectCNN(expect)
        else:
            raise ConfigError(f"cannot interpret expected config {expect!r}")
    else:
        model = _build_from_header(header)
    model.load_params(tensors)
    model.meta = header.get("meta", {})
    return model
