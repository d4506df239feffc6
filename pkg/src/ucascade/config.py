"""Experiment configuration: nested dataclasses loaded from YAML.

Schema (every key optional; defaults shown by ``ucascade config``)::

    seed: 0                  # master seed; all sub-seeds derive from it
    output_dir: runs/default
    phantom:   {n_volumes, shape, nodules, nodule_radius, nodule_intensity,
                ellipticity, vessels, vessel_radius, vessel_intensity,
                vessel_length, background, noise_std}
    split:     {ratios: [0.8, 0.1, 0.1]}
    seg:       {base_channels, depth, dropout, epochs, slices_per_epoch,
                positive_fraction, batch_size, lr, optimizer, max_pos_weight,
                patch, lr_schedule}
    detect:    {cube_edge, hidden, dropout, epochs, batch_size, lr,
                optimizer, augment, lr_schedule}
    mc:        {samples: 50}
    pipeline:  {threshold: 0.5, min_voxels: 4, cube_edge: 16}
    ensemble:  {alpha: 0.5, grid_step: 0.05}
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError


@dataclass
class PhantomSection:
    n_volumes: int = 60
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


@dataclass
class SplitSection:
    ratios: tuple = (0.8, 0.1, 0.1)


@dataclass
class SegSection:
    base_channels: int = 8
    depth: int = 2
    dropout: float = 0.5
    epochs: int = 30
    slices_per_epoch: int = 800
    positive_fraction: float = 0.5
    batch_size: int = 16
    lr: float = 2e-3
    optimizer: str = "adam"
    max_pos_weight: float = 3.0
    patch: int = 32
    lr_schedule: str = "cosine"


@dataclass
class DetectSection:
    cube_edge: int = 16
    hidden: int = 64
    dropout: float = 0.5
    epochs: int = 45
    batch_size: int = 32
    lr: float = 2e-3
    optimizer: str = "adam"
    augment: bool = True
    lr_schedule: str = "cosine"


@dataclass
class McSection:
    samples: int = 50


@dataclass
class PipelineSection:
    threshold: float = 0.5
    min_voxels: int = 4
    cube_edge: int = 16


@dataclass
class EnsembleSection:
    alpha: float = 0.5
    grid_step: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    split: SplitSection = field(default_factory=SplitSection)
    seg: SegSection = field(default_factory=SegSection)
    detect: DetectSection = field(default_factory=DetectSection)
    mc: McSection = field(default_factory=McSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)

    def validate(self):
        if self.phantom.n_volumes < 0:
            raise ConfigError("phantom.n_volumes must be non-negative")
        if self.mc.samples < 2:
            raise ConfigError("mc.samples must be >= 2")
        if self.pipeline.cube_edge != self.detect.cube_edge:
            raise ConfigError("pipeline.cube_edge and detect.cube_edge must agree")
        if not 0 < self.pipeline.threshold < 1:
            raise ConfigError("pipeline.threshold must lie in (0, 1)")
        if self.seg.optimizer not in ("sgd", "adam") or self.detect.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        for name, sec in (("seg", self.seg), ("detect", self.detect)):
            if sec.lr_schedule not in ("constant", "cosine"):
                raise ConfigError(f"{name}.lr_schedule must be 'constant' or 'cosine'")
        if self.seg.patch < 0 or self.seg.patch % (1 << self.seg.depth):
            raise ConfigError("seg.patch must be 0 or a positive multiple of 2**depth")
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        """Hash of everything that affects results (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if default is dataclasses.MISSING:
            sub = known[name].default_factory()
            if dataclasses.is_dataclass(sub):
                kwargs[name] = _build(type(sub), value, f"{where}.{name}" if where else name)
                continue
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise ConfigError(f"{where}.{name}: expected a list of {len(default)} values")
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data):
    return _build(ExperimentConfig, data or {}, "config").validate()


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg, path=None):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
