import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmseg.errors import InvalidArgumentError, ShapeError
from dmseg.metrics import dice_global, dice_per_case, evaluate, surface_distances, voe_rvd
from oracles import all_pairs_surface_metrics, random_blob_mask


def box(shape, lo, hi):
    m = np.zeros(shape, np.uint8)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1
    return m


def test_dice_shifted_cube():
    a = box((8, 8, 8), (2, 2, 2), (5, 5, 5))
    b = box((8, 8, 8), (3, 2, 2), (6, 5, 5))
    assert dice_per_case(a, b) == pytest.approx(2 / 3)


def test_dice_edge_cases():
    z = np.zeros((3, 3, 3), np.uint8)
    assert dice_per_case(z, z) == 1.0
    assert dice_per_case(z, 1 - z) == 0.0
    with pytest.raises(ShapeError):
        dice_per_case(z, np.zeros((3, 3, 2)))


def test_global_dice_pools_counts():
    a = np.zeros((4, 5, 5), np.uint8)
    b = np.zeros_like(a)
    a[0, :2] = 1
    b[2, :2] = 1
    # 10 voxels matched exactly, then 10 against a disjoint 10
    assert dice_global([(a, a), (a, b)]) == pytest.approx(20 / 40)
    with pytest.raises(InvalidArgumentError):
        dice_global([])


def test_nested_cubes_voe_rvd():
    ref = box((10, 10, 10), (2, 2, 2), (6, 6, 6))
    pred = np.zeros_like(ref)
    # 128 voxels containing the 64-voxel reference
    pred[2:10, 2:6, 2:6] = 1
    voe, rvd = voe_rvd(pred, ref)
    assert voe == pytest.approx(0.5)
    assert rvd == pytest.approx(1.0)
    # under-segmentation has the opposite sign
    assert voe_rvd(ref, pred)[1] == pytest.approx(-0.5)


def test_voe_rvd_empty_cases():
    z = np.zeros((3, 3, 3), np.uint8)
    assert voe_rvd(z, z) == (0.0, 0.0)
    voe, rvd = voe_rvd(1 - z, z)
    assert voe == 1.0 and math.isnan(rvd)


@given(st.integers(0, 100_000))
@settings(max_examples=50, deadline=None)
def test_dice_voe_identity(seed):
    rng = np.random.default_rng(seed)
    a = random_blob_mask(rng, 7)
    b = random_blob_mask(rng, 7)
    if not (a.any() or b.any()):
        return
    dc = dice_per_case(a, b)
    voe, _ = voe_rvd(a, b)
    assert abs(dc - 2 * (1 - voe) / (2 - voe)) <= 1e-9
    assert dc == dice_per_case(b, a)


def test_parallel_plates():
    a = box((12, 12, 12), (3, 1, 1), (4, 11, 11))
    b = box((12, 12, 12), (7, 1, 1), (8, 11, 11))
    sd = surface_distances(a, b)
    assert sd.assd_mm == pytest.approx(4.0)
    assert sd.msd_mm == pytest.approx(4.0)
    np.testing.assert_allclose((sd.assd_mm, sd.msd_mm, sd.rmsd_mm), all_pairs_surface_metrics(a, b), atol=1e-9)


def test_identical_masks_have_zero_distance(rng):
    m = random_blob_mask(rng, 9)
    sd = surface_distances(m, m)
    assert (sd.assd_mm, sd.msd_mm, sd.rmsd_mm) == (0.0, 0.0, 0.0)


def test_surface_metrics_match_all_pairs_oracle():
    rng = np.random.default_rng(21)
    for _ in range(40):
        n = int(rng.integers(5, 10))
        a = random_blob_mask(rng, n)
        b = random_blob_mask(rng, n)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        sd = surface_distances(a, b, spacing)
        if sd.degenerate:
            continue
        np.testing.assert_allclose((sd.assd_mm, sd.msd_mm, sd.rmsd_mm),
                                   all_pairs_surface_metrics(a, b, spacing), rtol=1e-6)


def test_surface_metric_properties(rng):
    for _ in range(20):
        a = random_blob_mask(rng, 8, 0.3)
        b = random_blob_mask(rng, 8, 0.3)
        sd = surface_distances(a, b)
        if sd.degenerate:
            continue
        back = surface_distances(b, a)
        assert (sd.assd_mm, sd.msd_mm) == pytest.approx((back.assd_mm, back.msd_mm))
        assert sd.assd_mm <= sd.rmsd_mm + 1e-12 <= sd.msd_mm + 2e-12
        doubled = surface_distances(a, b, (2.0, 2.0, 2.0))
        assert doubled.assd_mm == pytest.approx(2 * sd.assd_mm)
        assert doubled.msd_mm == pytest.approx(2 * sd.msd_mm)


def test_degenerate_surfaces():
    z = np.zeros((4, 5, 6), np.uint8)
    sd = surface_distances(z, z)
    assert sd.degenerate and sd.assd_mm == 0.0
    one = z.copy()
    one[1, 1, 1] = 1
    sd = surface_distances(one, z, (1.0, 2.0, 1.0))
    assert sd.degenerate
    assert sd.msd_mm == pytest.approx(math.sqrt(16 + 100 + 36))


def test_evaluate_report(tmp_path):
    ref = box((6, 6, 6), (1, 1, 1), (4, 4, 4))
    pred = box((6, 6, 6), (2, 1, 1), (5, 4, 4))
    empty = np.zeros_like(ref)
    report = evaluate([("a", pred, ref), ("b", ref, ref), ("c", empty, empty)], (1.0, 1.0, 1.0))
    agg = report.aggregate
    assert agg["dc_mean"] == pytest.approx((2 / 3 + 1 + 1) / 3)
    assert agg["degenerate_count"] == 1
    assert report.per_case[2].degenerate_flag

    report.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["case_id", "dc", "dg", "voe", "rvd", "assd_mm", "msd_mm", "rmsd_mm", "degenerate"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c", "aggregate"]

    nan_report = evaluate([("x", 1 - empty, empty)])
    nan_report.to_json(tmp_path / "m.json")
    data = json.load(open(tmp_path / "m.json"))
    assert data["per_case"][0]["rvd"] is None
    assert data["aggregate"]["rvd_mean"] is None
