"""Synthetic CT-like phantoms with nodules, vessel distractors and noise."""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numerics.tensor import derive_seed, make_rng
from .pipeline import NoduleTruth


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple = (32, 64, 64)
    nodules: tuple = (0, 3)
    nodule_radius: tuple = (2.0, 5.0)
    nodule_intensity: tuple = (0.5, 0.9)
    ellipticity: float = 0.15
    vessels: tuple = (4, 10)
    vessel_radius: tuple = (0.8, 1.8)
    vessel_intensity: tuple = (0.35, 0.65)
    vessel_length: tuple = (12.0, 48.0)
    background: float = 0.1
    noise_std: float = 0.06
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) <= 0:
            raise ConfigError(f"phantom shape must be three positive extents, got {self.shape}")
        for name in ("nodules", "nodule_radius", "nodule_intensity", "vessels", "vessel_radius",
                     "vessel_intensity", "vessel_length"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} range {lo}..{hi} is empty or negative")
        if self.nodule_radius[0] <= 0:
            raise ConfigError("nodule radius must be positive")
        if self.nodule_radius[1] * (1 + self.ellipticity) >= min(self.shape) / 2:
            raise ConfigError("nodule radius must stay below half the smallest extent")


@dataclass
class PhantomVolume:
    volume: np.ndarray
    mask: np.ndarray
    truths: list = field(default_factory=list)
    spacing: tuple = (1.0, 1.0, 1.0)


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def nodule_mask(shape, truths):
    """Union of the voxelized ellipsoids described by ``truths``."""
    zz, yy, xx = _grid(shape)
    mask = np.zeros(shape, dtype=bool)
    for t in truths:
        az, ay, ax = t.axes
        q = ((zz - t.z) / (t.r * az)) ** 2 + ((yy - t.y) / (t.r * ay)) ** 2 + ((xx - t.x) / (t.r * ax)) ** 2
        mask |= q <= 1.0
    return mask


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def generate_phantom(cfg, index):
    """Deterministic phantom number ``index`` for ``cfg``.

    Vessels are finite cylinders in random directions (label 0); nodules are
    slightly elliptical spheres that never overlap one another (label 1).
    Edges are partial-volume blended, then Gaussian noise is added and the
    result clamped to [0, 1].
    """
    cfg.validate()
    rng = make_rng(derive_seed(cfg.seed, index))
    shape = tuple(int(s) for s in cfg.shape)
    zz, yy, xx = _grid(shape)
    pts = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
    img = np.full(shape, cfg.background, dtype=np.float64)

    n_vessels = int(rng.integers(cfg.vessels[0], cfg.vessels[1] + 1))
    for _ in range(n_vessels):
        r = rng.uniform(*cfg.vessel_radius)
        length = rng.uniform(*cfg.vessel_length)
        center = rng.uniform([0, 0, 0], np.asarray(shape) - 1)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        a = center - direction * length / 2
        b = center + direction * length / 2
        level = rng.uniform(*cfg.vessel_intensity)
        d = _segment_distance(pts, a, b).reshape(shape)
        cover = np.clip(r + 0.5 - d, 0.0, 1.0)
        img = np.maximum(img, cfg.background + (level - cfg.background) * cover)

    n_nodules = int(rng.integers(cfg.nodules[0], cfg.nodules[1] + 1))
    truths = []
    for _ in range(n_nodules):
        for _attempt in range(100):
            r = rng.uniform(*cfg.nodule_radius)
            axes = tuple(float(v) for v in rng.uniform(1 - cfg.ellipticity, 1 + cfg.ellipticity, 3))
            reach = r * max(axes)
            lo = np.full(3, reach)
            hi = np.asarray(shape, dtype=np.float64) - 1 - reach
            if np.any(hi < lo):
                continue
            c = rng.uniform(lo, hi)
            if all(np.linalg.norm(c - np.array(t.center)) > reach + t.r * max(t.axes) + 1.0 for t in truths):
                truths.append(NoduleTruth(float(c[0]), float(c[1]), float(c[2]), float(r), axes))
                break
        else:
            raise DataError(f"could not place nodule {len(truths) + 1} of {n_nodules} after 100 attempts")

    for t in truths:
        level = rng.uniform(*cfg.nodule_intensity)
        az, ay, ax = t.axes
        q = np.sqrt(((zz - t.z) / az) ** 2 + ((yy - t.y) / ay) ** 2 + ((xx - t.x) / ax) ** 2)
        cover = np.clip(t.r + 0.5 - q, 0.0, 1.0)
        img = np.maximum(img, cfg.background + (level - cfg.background) * cover)

    img += rng.normal(0.0, cfg.noise_std, shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return PhantomVolume(img, nodule_mask(shape, truths).astype(np.uint8), truths)


def split_dataset(ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Shuffle ``ids`` deterministically and cut into (train, val, test).

    Validation and test sizes are the rounded ratio shares; train gets the
    remainder.
    """
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ids)
    perm = make_rng(derive_seed(seed, 0x5917)).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ConfigError("split ratios leave no room for the training split")
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# ------------------------------------------------------------------------- IO

class VolumeFileError(DataError):
    pass


class SidecarError(VolumeFileError):
    pass


class VolumeShapeError(VolumeFileError):
    pass


class NonFiniteVolumeError(VolumeFileError):
    pass


def write_volume(path, pv):
    """Write ``<path>.vol`` (f32 LE), ``<path>.msk`` (packed bits) and ``<path>.vol.json``."""
    path = os.fspath(path)
    base = os.path.basename(path)
    vol = np.ascontiguousarray(pv.volume, dtype="<f4")
    if not np.all(np.isfinite(vol)):
        raise NonFiniteVolumeError("refusing to write non-finite intensities")
    if pv.mask.shape != vol.shape:
        raise VolumeShapeError(f"mask shape {pv.mask.shape} != volume shape {vol.shape}")
    with open(path + ".vol", "wb") as fh:
        fh.write(vol.tobytes())
    with open(path + ".msk", "wb") as fh:
        fh.write(np.packbits(np.asarray(pv.mask, dtype=bool).ravel()).tobytes())
    sidecar = {
        "shape": list(vol.shape),
        "spacing": [float(s) for s in pv.spacing],
        "mask_file": base + ".msk",
        "truths": [{"z": t.z, "y": t.y, "x": t.x, "r": t.r, "axes": list(t.axes)} for t in pv.truths],
    }
    with open(path + ".vol.json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_volume(path):
    path = os.fspath(path)
    try:
        with open(path + ".vol.json") as fh:
            meta = json.load(fh)
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
        truths = [NoduleTruth(float(t["z"]), float(t["y"]), float(t["x"]), float(t["r"]),
                              tuple(float(a) for a in t.get("axes", (1.0, 1.0, 1.0))))
                  for t in meta["truths"]]
        mask_file = meta["mask_file"]
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SidecarError(f"malformed sidecar {path}.vol.json: {exc}") from exc
    if len(shape) != 3 or min(shape) <= 0:
        raise SidecarError(f"sidecar shape {shape} is not three positive extents")
    raw = np.fromfile(path + ".vol", dtype="<f4")
    n = int(np.prod(shape))
    if raw.size != n:
        raise VolumeShapeError(f"payload holds {raw.size} values, sidecar shape {shape} needs {n}")
    if not np.all(np.isfinite(raw)):
        raise NonFiniteVolumeError(f"{path}.vol contains non-finite values")
    packed = np.fromfile(os.path.join(os.path.dirname(path), mask_file), dtype=np.uint8)
    if packed.size != (n + 7) // 8:
        raise VolumeShapeError(f"mask holds {packed.size} bytes, shape {shape} needs {(n + 7) // 8}")
    mask = np.unpackbits(packed)[:n].reshape(shape)
    return PhantomVolume(raw.reshape(shape).astype(np.float32), mask, truths, spacing)


def phantom_config_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
