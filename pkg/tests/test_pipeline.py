import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import components_flood, crop_naive
from ucascade.errors import DataError
from ucascade.pipeline import (CANDIDATE_COLUMNS, Candidate, NoduleTruth, build_composite, crop_cube,
                               extract_candidates, label_candidates, read_candidate_table, seg_candidate_metrics,
                               stack_slices, write_candidate_table)


def _half_up(v):
    return int(math.floor(v + 0.5))


def test_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = tuple(int(n) for n in rng.integers(3, 9, 3))
        mu = rng.random(shape) * rng.random() * 1.3
        got = extract_candidates(mu, 0.5, min_voxels=1)
        comps = components_flood(mu >= 0.5)
        assert len(got) == len(comps)
        for cand, comp in zip(got, comps):
            assert cand.component_voxels == len(comp)
            c = np.mean(sorted(comp), axis=0)
            assert cand.centroid == tuple(_half_up(v) for v in c)


def test_min_voxels_filters_small_components():
    mu = np.zeros((8, 8, 8))
    mu[1, 1, 1] = 0.9
    mu[4:6, 4:6, 4:6] = 0.9
    got = extract_candidates(mu, 0.5, min_voxels=4)
    assert len(got) == 1 and got[0].component_voxels == 8
    assert got[0].centroid == (5, 5, 5)  # 4.5 rounds half-up


def test_threshold_edge_inclusive_and_errors():
    mu = np.zeros((4, 4, 4))
    mu[1:3, 1:3, 1:3] = 0.5
    assert len(extract_candidates(mu, 0.5, 1)) == 1
    assert extract_candidates(np.zeros((4, 4, 4)), 0.5) == []
    with pytest.raises(DataError):
        extract_candidates(mu, 1.0)
    with pytest.raises(DataError):
        extract_candidates(mu[0], 0.5)


def test_diagonal_voxels_connect():
    mu = np.zeros((3, 3, 3))
    mu[0, 0, 0] = mu[1, 1, 1] = mu[2, 2, 2] = 1.0
    assert len(extract_candidates(mu, 0.5, 1)) == 1


def test_crop_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        vol = rng.random(tuple(int(n) for n in rng.integers(4, 20, 3)))
        edge = int(rng.choice([2, 4, 8]))
        c = tuple(int(rng.integers(0, n)) for n in vol.shape)
        np.testing.assert_array_equal(crop_cube(vol, c, edge), crop_naive(vol, c, edge))


def test_crop_centroid_at_half_edge_and_errors():
    vol = np.arange(1000.0).reshape(10, 10, 10)
    cube = crop_cube(vol, (5, 5, 5), 4)
    assert cube[2, 2, 2] == vol[5, 5, 5]
    corner = crop_cube(vol, (0, 0, 0), 4)
    assert corner[:2].sum() == 0 and corner[2, 2, 2] == vol[0, 0, 0]
    with pytest.raises(DataError):
        crop_cube(vol, (10, 0, 0), 4)
    with pytest.raises(DataError):
        crop_cube(vol, (0, 0, 0), 3)


def test_stack_slices_order_and_errors():
    maps = [(np.full((2, 2), z), np.full((2, 2), -z)) for z in (2, 0, 1)]
    mu, sd = stack_slices(maps, order=[2, 0, 1])
    np.testing.assert_array_equal(mu[:, 0, 0], [0, 1, 2])
    np.testing.assert_array_equal(sd[:, 0, 0], [0, -1, -2])
    with pytest.raises(DataError):
        stack_slices(maps, order=[0, 0, 1])
    with pytest.raises(DataError):
        stack_slices([])


def test_composite_channels():
    a = np.zeros((4, 4, 4))
    comp = build_composite(a, a + 1, a + 2)
    assert comp.shape == (3, 4, 4, 4)
    np.testing.assert_array_equal(comp[:, 0, 0, 0], [0, 1, 2])
    with pytest.raises(DataError):
        build_composite(a, a[:2], a)


def test_labeling_and_candidate_metrics():
    truths = [NoduleTruth(5, 5, 5, 3), NoduleTruth(20, 20, 20, 2)]
    cands = [Candidate((6, 5, 5), 10), Candidate((5, 7, 5), 10), Candidate((20, 23, 20), 10)]
    hit = label_candidates(cands, truths)
    assert hit == {0}
    assert [c.label for c in cands] == [1, 1, 0]
    recall, precision = seg_candidate_metrics(cands, truths)
    assert recall == 0.5 and precision == pytest.approx(2 / 3)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        recall, precision = seg_candidate_metrics([], truths)
    assert precision == 0.0 and recall == 0.0 and w


def test_candidate_table_roundtrip(tmp_path):
    c = Candidate((1, 2, 3), 7, volume_id=4, label=1)
    c.predictions = {"p": 0.1 + 0.2}
    path = tmp_path / "c.csv"
    write_candidate_table(path, [c], ["p"])
    rows = read_candidate_table(path)
    assert list(rows[0]) == CANDIDATE_COLUMNS + ["p"]
    assert float(rows[0]["p"]) == 0.1 + 0.2
    assert rows[0]["z"] == "1"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_mirror_equivariance(seed):
    rng = np.random.default_rng(seed)
    mu = rng.random((6, 7, 5))
    a = extract_candidates(mu, 0.6, 1)
    b = extract_candidates(mu[:, :, ::-1], 0.6, 1)
    ea = sorted((c.component_voxels, c.centroid_exact[0], c.centroid_exact[1], 4 - c.centroid_exact[2]) for c in a)
    eb = sorted((c.component_voxels, c.centroid_exact[0], c.centroid_exact[1], c.centroid_exact[2]) for c in b)
    assert len(ea) == len(eb)
    for u, v in zip(ea, eb):
        np.testing.assert_allclose(u, v, atol=1e-9)
