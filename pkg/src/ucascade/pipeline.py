"""Glue between the two stages: slice stacking, candidate extraction,
cube cropping, composite building and ground-truth matching."""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class NoduleTruth:
    z: float
    y: float
    x: float
    r: float
    axes: tuple = (1.0, 1.0, 1.0)

    @property
    def center(self):
        return (self.z, self.y, self.x)


@dataclass
class Candidate:
    centroid: tuple
    component_voxels: int
    centroid_exact: tuple = None
    volume_id: int = -1
    label: int = 0
    matched_truth: int = -1
    image: np.ndarray = field(default=None, repr=False)
    seg_mean: np.ndarray = field(default=None, repr=False)
    seg_std: np.ndarray = field(default=None, repr=False)
    predictions: dict = field(default_factory=dict)


def stack_slices(maps, order=None):
    """Stack per-slice ``(mean, std)`` maps into ``[D, H, W]`` volumes.

    ``maps`` is a sequence of objects with ``mean``/``std`` (or 2-tuples);
    ``order[i]`` gives the slice index of ``maps[i]``.
    """
    maps = list(maps)
    D = len(maps)
    if D == 0:
        raise DataError("no slices to stack")
    order = list(range(D)) if order is None else [int(i) for i in order]
    if sorted(order) != list(range(D)):
        raise DataError(f"slice order must cover 0..{D - 1} exactly once")
    pairs = [(m.mean, m.std) if hasattr(m, "mean") else tuple(m) for m in maps]
    shape = np.shape(pairs[0][0])
    if any(np.shape(a) != shape or np.shape(b) != shape for a, b in pairs):
        raise DataError("all slices must share one shape")
    mu = np.empty((D,) + shape, dtype=np.result_type(pairs[0][0]))
    sd = np.empty_like(mu)
    for (a, b), z in zip(pairs, order):
        mu[z] = a
        sd[z] = b
    return mu, sd


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def extract_candidates(mu, threshold=0.5, min_voxels=4, cube_edge=16):
    """One candidate per 26-connected component of ``mu >= threshold``.

    Components smaller than ``min_voxels`` are dropped; the centroid is the
    mean voxel coordinate rounded half-up. Candidates come back in the raster
    order of each component's first voxel.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must lie in (0, 1), got {threshold}")
    mu = np.asarray(mu)
    if mu.ndim != 3:
        raise DataError(f"expected a [D, H, W] volume, got shape {mu.shape}")
    labels, n = ndimage.label(mu >= threshold, structure=CONNECTIVITY_26)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    counts = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    cents = ndimage.center_of_mass(np.ones_like(labels, dtype=np.float64), labels, idx)
    out = []
    for count, c in zip(counts, cents):
        if count < min_voxels:
            continue
        out.append(Candidate(centroid=tuple(_round_half_up(v) for v in c),
                             component_voxels=int(count),
                             centroid_exact=tuple(float(v) for v in c)))
    return out


def crop_cube(volume, centroid, edge=16):
    """Cube of side ``edge`` with ``centroid`` at index ``edge // 2``; zero fill outside."""
    volume = np.asarray(volume)
    if edge <= 0 or edge % 2:
        raise DataError(f"cube edge must be positive and even, got {edge}")
    c = [int(v) for v in centroid]
    if len(c) != 3 or any(not 0 <= ci < n for ci, n in zip(c, volume.shape)):
        raise DataError(f"centroid {tuple(c)} outside volume of shape {volume.shape}")
    out = np.zeros((edge,) * 3, dtype=volume.dtype)
    src, dst = [], []
    for ci, n in zip(c, volume.shape):
        lo = ci - edge // 2
        s0, s1 = max(lo, 0), min(lo + edge, n)
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def build_composite(image, mu, sigma):
    """Stack image, seg mean and seg std as channels 0, 1, 2."""
    image, mu, sigma = (np.asarray(a) for a in (image, mu, sigma))
    if not image.shape == mu.shape == sigma.shape:
        raise DataError(f"composite channels differ in shape: {image.shape}, {mu.shape}, {sigma.shape}")
    return np.stack([image, mu, sigma])


def label_candidates(candidates, truths):
    """Label each candidate 1 iff its centroid is within some truth's radius.

    Sets ``label`` and ``matched_truth`` in place and returns the set of
    truth indices that were hit.
    """
    hit = set()
    for cand in candidates:
        cand.label, cand.matched_truth = 0, -1
        best = None
        for j, t in enumerate(truths):
            d = math.dist(cand.centroid, t.center)
            if d <= t.r and (best is None or d < best[0]):
                best = (d, j)
        if best is not None:
            cand.label, cand.matched_truth = 1, best[1]
            hit.add(best[1])
    return hit


def seg_candidate_metrics(candidates, truths):
    """Candidate-level ``(recall, precision)`` of the segmentation stage.

    ``candidates``/``truths`` may be flat lists or lists of per-volume lists;
    candidates must already be labeled. Recall counts truths hit by at least
    one candidate. With no candidates precision is reported as 0 and a
    warning is emitted.
    """
    if candidates and isinstance(candidates[0], (list, tuple)):
        pairs = list(zip(candidates, truths))
    else:
        pairs = [(candidates, truths)]
    n_truth = n_hit = n_cand = n_pos = 0
    for cands, tr in pairs:
        n_truth += len(tr)
        n_cand += len(cands)
        n_pos += sum(c.label for c in cands)
        n_hit += len({c.matched_truth for c in cands if c.label == 1})
    recall = n_hit / n_truth if n_truth else float("nan")
    if n_cand == 0:
        warnings.warn("no candidates: precision undefined, reported as 0", RuntimeWarning, stacklevel=2)
        precision = 0.0
    else:
        precision = n_pos / n_cand
    return recall, precision


CANDIDATE_COLUMNS = ["volume_id", "z", "y", "x", "label", "component_voxels"]


def write_candidate_table(path, candidates, extra_columns=()):
    """CSV export; ``extra_columns`` name keys of ``Candidate.predictions``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_COLUMNS + list(extra_columns))
        for c in candidates:
            row = [c.volume_id, *c.centroid, c.label, c.component_voxels]
            row += [repr(float(c.predictions[k])) for k in extra_columns]
            w.writerow(row)


def read_candidate_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
