import json
import math

import numpy as np
import pytest

from ucascade.errors import ConfigError, DataError
from ucascade.phantom import (NonFiniteVolumeError, PhantomConfig, SidecarError, VolumeShapeError, generate_phantom,
                              nodule_mask, read_volume, split_dataset, write_volume)
from ucascade.pipeline import NoduleTruth

SMALL = PhantomConfig(shape=(16, 32, 32), seed=3)


def test_deterministic():
    a, b = generate_phantom(SMALL, 5), generate_phantom(SMALL, 5)
    np.testing.assert_array_equal(a.volume, b.volume)
    assert a.truths == b.truths
    assert not np.array_equal(a.volume, generate_phantom(SMALL, 6).volume)


def test_order_independent():
    forward = [generate_phantom(SMALL, i).volume for i in range(4)]
    backward = [generate_phantom(SMALL, i).volume for i in reversed(range(4))][::-1]
    for f, b in zip(forward, backward):
        np.testing.assert_array_equal(f, b)


def test_mask_consistent_with_truths_and_range():
    for i in range(10):
        pv = generate_phantom(SMALL, i)
        np.testing.assert_array_equal(pv.mask, nodule_mask(SMALL.shape, pv.truths))
        assert pv.volume.min() >= 0 and pv.volume.max() <= 1
        for j, t in enumerate(pv.truths):
            for u in pv.truths[j + 1:]:
                assert math.dist(t.center, u.center) > t.r * max(t.axes) + u.r * max(u.axes)


def test_no_nodules():
    pv = generate_phantom(PhantomConfig(shape=(8, 16, 16), nodules=(0, 0), nodule_radius=(1, 2)), 0)
    assert pv.truths == [] and pv.mask.sum() == 0


def test_sphere_voxel_count():
    for r in (2.0, 3.5, 5.0):
        n = nodule_mask((20, 20, 20), [NoduleTruth(10, 10, 10, r)]).sum()
        assert abs(n - 4 / 3 * math.pi * r ** 3) <= 0.25 * 4 / 3 * math.pi * r ** 3


def test_positive_fraction_below_two_percent():
    cfg = PhantomConfig(seed=1)
    frac = np.mean([generate_phantom(cfg, i).mask.mean() for i in range(100)])
    assert frac < 0.02


def test_unplaceable_nodules():
    cfg = PhantomConfig(shape=(12, 12, 12), nodules=(3, 3), nodule_radius=(4.5, 4.9), ellipticity=0.0)
    with pytest.raises(DataError):
        generate_phantom(cfg, 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(nodules=(3, 1)), 0)
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(shape=(8, 64, 64), nodule_radius=(2, 5)), 0)


def test_split_sizes_and_partition():
    assert tuple(map(len, split_dataset(range(10), (0.8, 0.1, 0.1), 0))) == (8, 1, 1)
    assert tuple(map(len, split_dataset(range(7), (1, 0, 0), 0))) == (7, 0, 0)
    for seed in range(100):
        ids = list(range(int(np.random.default_rng(seed).integers(1, 40))))
        tr, va, te = split_dataset(ids, (0.8, 0.1, 0.1), seed)
        assert sorted(tr + va + te) == ids
        assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    with pytest.raises(DataError):
        split_dataset([], (0.8, 0.1, 0.1))
    with pytest.raises(ConfigError):
        split_dataset(range(4), (0.5, 0.1, 0.1))


def test_volume_roundtrip(tmp_path):
    pv = generate_phantom(SMALL, 2)
    write_volume(tmp_path / "v", pv)
    back = read_volume(tmp_path / "v")
    np.testing.assert_array_equal(back.volume, pv.volume)
    np.testing.assert_array_equal(back.mask, pv.mask)
    assert back.truths == pv.truths


def test_volume_file_errors(tmp_path):
    pv = generate_phantom(SMALL, 2)
    base = tmp_path / "v"
    write_volume(base, pv)
    side = json.loads((tmp_path / "v.vol.json").read_text())

    side["shape"] = [16, 32, 31]
    (tmp_path / "v.vol.json").write_text(json.dumps(side))
    with pytest.raises(VolumeShapeError):
        read_volume(base)

    (tmp_path / "v.vol.json").write_text("{not json")
    with pytest.raises(SidecarError):
        read_volume(base)

    write_volume(base, pv)
    raw = np.fromfile(tmp_path / "v.vol", dtype="<f4")
    raw[17] = np.nan
    raw.tofile(tmp_path / "v.vol")
    with pytest.raises(NonFiniteVolumeError):
        read_volume(base)
