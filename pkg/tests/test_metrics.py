import csv
import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cascade_seg import metrics as M
from cascade_seg.phantom import PhantomSpec, generate_phantom
from cascade_seg.volume import GeometryError, LabelMap

SPACING = (1.667, 1.667, 10.0)


# -- brute-force oracles ----------------------------------------------------


def dice_oracle(a, b) -> Fraction:
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    if not sa and not sb:
        return Fraction(1)
    return Fraction(2 * len(sa & sb), len(sa) + len(sb))


def boundary_oracle(mask):
    pts = set(map(tuple, np.argwhere(mask)))
    out = set()
    for p in pts:
        for axis in range(3):
            for d in (-1, 1):
                q = list(p)
                q[axis] += d
                if tuple(q) not in pts:
                    out.add(p)
    return sorted(out)


def directed_oracle(src, dst):
    """max over src of min over dst, exhaustive in chunks."""
    best = 0.0
    for start in range(0, len(src), 256):
        d = np.sqrt(((src[start : start + 256, None, :] - dst[None, :, :]) ** 2).sum(-1))
        best = max(best, float(d.min(axis=1).max()))
    return best


def hausdorff_oracle(a, b, spacing):
    pa = np.array(boundary_oracle(a), float).reshape(-1, 3) * spacing
    pb = np.array(boundary_oracle(b), float).reshape(-1, 3) * spacing
    if len(pa) == 0 or len(pb) == 0:
        return math.nan
    return max(directed_oracle(pa, pb), directed_oracle(pb, pa))


def random_mask_pair(rng, n=16):
    kind = rng.integers(0, 4)
    if kind == 0:  # sparse salt
        return rng.random((n,) * 3) < rng.uniform(0.0, 0.05), rng.random((n,) * 3) < rng.uniform(0.0, 0.05)
    out = []
    for _ in range(2):
        field = ndimage.gaussian_filter(rng.standard_normal((n,) * 3), rng.uniform(1.0, 2.5))
        out.append(field > np.quantile(field, rng.uniform(0.5, 0.97)))
    if kind == 2:  # overlapping versions of one blob
        out[1] = np.roll(out[0], rng.integers(-2, 3, size=3), axis=(0, 1, 2))
    return out[0], out[1]


def random_pairs(count, seed):
    rng = np.random.default_rng(seed)
    return [random_mask_pair(rng) for _ in range(count)]


# -- dice -------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((2, 2, 2), bool)
    b = np.zeros((2, 2, 2), bool)
    a[0, 0, :] = True
    b[0, 0, 0] = b[1, 1, 1] = True
    assert M.dice(a, b) == 0.5
    assert M.dice(a, a) == 1.0
    assert M.dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert M.dice(a, np.zeros_like(a)) == 0.0
    with pytest.raises(GeometryError):
        M.dice(a, np.zeros((2, 2, 3), bool))


@pytest.mark.parametrize("seed", range(4))
def test_dice_oracle_exact(seed):
    for a, b in random_pairs(50, seed):
        assert M.dice(a, b) == float(dice_oracle(a, b))
        assert M.dice(a, b) == M.dice(b, a)


# -- hausdorff --------------------------------------------------------------


def test_boundary_matches_oracle():
    for a, _ in random_pairs(20, 10):
        assert sorted(map(tuple, np.argwhere(M.boundary(a)))) == boundary_oracle(a)


def test_hausdorff_single_voxels():
    a = np.zeros((8, 4, 4), bool)
    b = np.zeros_like(a)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert M.hausdorff_mm(a, b, SPACING) == pytest.approx(5.001, abs=1e-12)


def test_hausdorff_identity_and_empty():
    a = np.zeros((6, 6, 6), bool)
    a[1:4, 2:5, 1:3] = True
    assert M.hausdorff_mm(a, a, SPACING) == 0.0
    assert math.isnan(M.hausdorff_mm(a, np.zeros_like(a), SPACING))
    assert math.isnan(M.hausdorff_mm(np.zeros_like(a), np.zeros_like(a), SPACING))


@pytest.mark.parametrize("seed", range(4))
def test_hausdorff_oracle(seed):
    spacing = np.array(SPACING)
    for a, b in random_pairs(50, 100 + seed):
        got = M.hausdorff_mm(a, b, SPACING)
        want = hausdorff_oracle(a, b, spacing)
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert abs(got - want) <= 1e-9
            assert got == M.hausdorff_mm(b, a, SPACING)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-2, 2)))
def test_hausdorff_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    a = np.zeros((20, 20, 12), bool)
    b = np.zeros_like(a)
    a[5:12, 6:11, 4:7] = rng.random((7, 5, 3)) < 0.7
    b[6:13, 5:12, 3:8] = rng.random((7, 7, 5)) < 0.7
    if not a.any() or not b.any():
        return
    moved = [np.roll(m, shift, axis=(0, 1, 2)) for m in (a, b)]
    assert M.hausdorff_mm(*moved, SPACING) == pytest.approx(M.hausdorff_mm(a, b, SPACING), abs=1e-12)


def test_hausdorff_percentile_not_above_max():
    a, b = random_pairs(1, 7)[0]
    if a.any() and b.any():
        assert M.hausdorff_mm(a, b, SPACING, percentile=95) <= M.hausdorff_mm(a, b, SPACING)


# -- volumes and ratios -----------------------------------------------------


def test_volume_arithmetic():
    m = np.zeros((10, 10, 2), bool)
    m.reshape(-1)[:100] = True
    assert M.volume_mm3(m, SPACING) == pytest.approx(2778.889, abs=1e-9)
    assert M.volume_mm3(np.zeros_like(m), SPACING) == 0.0
    assert M.voldif(m, m, SPACING) == 0.0
    n = np.zeros_like(m)
    n[0, 0, 0] = True
    assert M.voldif(m, n, SPACING) == 99 * (1.667 * 1.667 * 10.0)


def test_volume_additive_for_disjoint():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8, 8)) < 0.3
    b = (rng.random((8, 8, 8)) < 0.3) & ~a
    assert M.volume_mm3(a | b, SPACING) == pytest.approx(M.volume_mm3(a, SPACING) + M.volume_mm3(b, SPACING), rel=1e-15)


def test_ratio_example():
    gt = np.full((10, 10, 1), 2, np.uint8)
    pred = gt.copy()
    gt.reshape(-1)[:10] = 3
    pred.reshape(-1)[:15] = 3
    assert M.ratio_error(pred, gt, 3) == 5.0
    assert M.ratio_error(gt, gt, 3) == 0.0
    assert M.ratio_error(pred, gt, 4) == 0.0
    assert M.ratio_pct(np.zeros((2, 2, 2), np.uint8), 3) == 0.0
    with pytest.raises(ValueError):
        M.ratio_error(pred, gt, 2)


def test_masks():
    lab = np.array([0, 1, 2, 3, 4]).reshape(5, 1, 1)
    assert M.myocardium_mask(lab).ravel().tolist() == [False, False, True, True, True]
    assert M.class_mask(lab, 3).ravel().tolist() == [False, False, False, True, False]
    assert M.myocardium_mask(np.full((2, 2, 2), 2)).all()


def test_phantom_mask_cardinalities():
    _, lab = generate_phantom(PhantomSpec(seed=5, noreflow_probability=1.0))
    counts = np.bincount(lab.voxels.ravel(), minlength=5)
    assert M.myocardium_mask(lab).sum() == counts[2] + counts[3] + counts[4]
    for c in range(5):
        assert M.class_mask(lab, c).sum() == counts[c]


# -- per-case rows and reports ----------------------------------------------


def labelled_pair(seed):
    _, gt = generate_phantom(PhantomSpec(seed=seed, noreflow_probability=1.0, case_id=f"c{seed}"))
    vox = gt.voxels.copy()
    vox[np.random.default_rng(seed).random(vox.shape) < 0.02] = 2
    return LabelMap(vox, gt.spacing, gt.case_id), gt


def test_evaluate_identity():
    _, gt = labelled_pair(1)
    row = M.evaluate_case(gt, gt)
    assert row["case_id"] == "c1"
    for col in ("myo_dice", "inf_dice", "nr_dice"):
        assert row[col] == 100.0
    for col in ("myo_voldif_mm3", "myo_hsd_mm", "inf_voldif_mm3", "inf_ratio_pts", "nr_voldif_mm3", "nr_ratio_pts"):
        assert row[col] == 0.0


def test_evaluate_case_matches_components():
    pred, gt = labelled_pair(2)
    row = M.evaluate_case(pred, gt)
    assert row["myo_dice"] == 100 * M.dice(M.myocardium_mask(pred), M.myocardium_mask(gt))
    assert row["inf_voldif_mm3"] == M.voldif(pred.voxels == 3, gt.voxels == 3, gt.spacing)
    assert row["myo_hsd_mm"] == M.hausdorff_mm(M.myocardium_mask(pred), M.myocardium_mask(gt), gt.spacing)
    assert 0 <= row["myo_dice"] <= 100 and row["myo_hsd_mm"] >= 0


def test_aggregate_is_mean_and_tracks_exclusions():
    rows = [M.evaluate_case(*labelled_pair(s)) for s in (3, 4)]
    empty_gt = LabelMap(np.zeros((64, 64, 8), np.uint8), SPACING, "empty")
    rows.append(M.evaluate_case(empty_gt, empty_gt))
    report = M.aggregate(rows[:2])
    for col in M.METRIC_COLUMNS:
        assert report.aggregate[col] == pytest.approx((rows[0][col] + rows[1][col]) / 2, rel=1e-15)
    report = M.aggregate(rows)
    assert report.hsd_not_evaluable == ["empty"]
    assert report.aggregate["n_hsd_excluded"] == 1
    assert report.aggregate["myo_hsd_mm"] == pytest.approx((rows[0]["myo_hsd_mm"] + rows[1]["myo_hsd_mm"]) / 2)


def test_geometry_mismatch_is_excluded():
    pred, gt = labelled_pair(5)
    bad = LabelMap(np.zeros((4, 4, 4), np.uint8), SPACING, "bad")
    report = M.evaluate_pairs([(pred, gt), (bad, gt)])
    assert report.aggregate["n_cases"] == 1
    assert report.aggregate["n_excluded"] == 1
    assert report.excluded_cases[0]["case_id"] == gt.case_id


def test_report_schema_and_purity(tmp_path):
    _, gt = labelled_pair(6)
    empty = LabelMap(np.zeros(gt.extents, np.uint8), gt.spacing, "e")
    report = M.evaluate_pairs([labelled_pair(6), (empty, gt)])
    text = report.to_csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == M.COLUMNS
    assert rows[1]["myo_hsd_mm"] == "NA"
    doc = json.loads(report.to_json())
    assert set(doc) == {"columns", "cases", "aggregate", "excluded_cases", "hsd_not_evaluable"}
    assert doc["columns"] == M.COLUMNS
    assert doc["cases"][1]["myo_hsd_mm"] is None
    again = M.evaluate_pairs([labelled_pair(6), (empty, gt)])
    assert again.to_csv() == text and again.to_json() == report.to_json()
    csv_path, json_path = report.write(tmp_path / "r")
    assert csv_path.read_text() == text
    assert "Dice(%)" in report.table() and "HSD(mm)" in report.table()
