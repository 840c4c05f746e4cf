"""Geometrical and clinical evaluation of label maps.

Per case: Dice (%) for myocardium, infarction and no-reflow; absolute volume
errors (mm^3) for the same three regions; the myocardial Hausdorff distance
(mm); and absolute errors, in percentage points, of the infarction and
no-reflow share of the myocardium.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .volume import GeometryError, LabelMap

MYOCARDIUM_CLASSES = (2, 3, 4)

COLUMNS = [
    "case_id",
    "myo_dice",
    "myo_voldif_mm3",
    "myo_hsd_mm",
    "inf_dice",
    "inf_voldif_mm3",
    "inf_ratio_pts",
    "nr_dice",
    "nr_voldif_mm3",
    "nr_ratio_pts",
]
METRIC_COLUMNS = COLUMNS[1:]

# display grouping: (target, column, header)
TABLE_LAYOUT = [
    ("Myocardium", "myo_dice", "Dice(%)"),
    ("Myocardium", "myo_voldif_mm3", "VolDif(mm3)"),
    ("Myocardium", "myo_hsd_mm", "HSD(mm)"),
    ("Infarction", "inf_dice", "Dice(%)"),
    ("Infarction", "inf_voldif_mm3", "VolDif(mm3)"),
    ("Infarction", "inf_ratio_pts", "Ratio(%)"),
    ("NoReflow", "nr_dice", "Dice(%)"),
    ("NoReflow", "nr_voldif_mm3", "VolDif(mm3)"),
    ("NoReflow", "nr_ratio_pts", "Ratio(%)"),
]


def _check_masks(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|A&B| / (|A| + |B|)``; 1.0 when both are empty."""
    _check_masks(pred, gt)
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def myocardium_mask(labels: LabelMap | np.ndarray) -> np.ndarray:
    lab = labels.voxels if isinstance(labels, LabelMap) else np.asarray(labels)
    return np.isin(lab, MYOCARDIUM_CLASSES)


def class_mask(labels: LabelMap | np.ndarray, c: int) -> np.ndarray:
    lab = labels.voxels if isinstance(labels, LabelMap) else np.asarray(labels)
    return lab == c


def volume_mm3(mask: np.ndarray, spacing: Sequence[float]) -> float:
    sx, sy, sz = spacing
    return float(np.count_nonzero(mask)) * (sx * sy * sz)


def voldif(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float]) -> float:
    return abs(volume_mm3(pred, spacing) - volume_mm3(gt, spacing))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    mask = np.asarray(mask, bool)
    if mask.ndim != 3:
        raise GeometryError(f"boundary expects a 3D mask, got shape {mask.shape}")
    padded = np.pad(mask, 1)
    interior = mask.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def hausdorff_mm(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float], percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm.

    Returns NaN when either mask is empty. ``percentile`` (e.g. 95) replaces
    the maxima of the directed distances with that percentile.
    """
    _check_masks(pred, gt)
    pa = np.argwhere(boundary(pred)) * np.asarray(spacing, float)
    pb = np.argwhere(boundary(gt)) * np.asarray(spacing, float)
    if len(pa) == 0 or len(pb) == 0:
        return math.nan
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    if percentile is None:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def ratio_pct(labels: LabelMap | np.ndarray, c: int) -> float:
    """Share of the myocardium taken by class ``c``, in percent; 0 for an empty myocardium."""
    myo = np.count_nonzero(myocardium_mask(labels))
    if myo == 0:
        return 0.0
    return 100.0 * np.count_nonzero(class_mask(labels, c)) / myo


def ratio_error(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, c: int) -> float:
    if c not in (3, 4):
        raise ValueError(f"ratio error is defined for classes 3 and 4, got {c}")
    return abs(ratio_pct(pred, c) - ratio_pct(gt, c))


def foreground_dice(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray) -> float:
    """Mean of the per-class Dice over classes 1..4, as a fraction."""
    return float(np.mean([dice(class_mask(pred, c), class_mask(gt, c)) for c in range(1, 5)]))


def evaluate_case(pred: LabelMap, gt: LabelMap, case_id: str | None = None) -> dict:
    """One report row: all nine quantities plus ``case_id``.

    Dice values are percentages. ``myo_hsd_mm`` is NaN when either
    myocardium is empty.
    """
    gt.check_geometry(pred)
    sp = gt.spacing
    myo_p, myo_g = myocardium_mask(pred), myocardium_mask(gt)
    inf_p, inf_g = class_mask(pred, 3), class_mask(gt, 3)
    nr_p, nr_g = class_mask(pred, 4), class_mask(gt, 4)
    return {
        "case_id": case_id if case_id is not None else gt.case_id,
        "myo_dice": 100.0 * dice(myo_p, myo_g),
        "myo_voldif_mm3": voldif(myo_p, myo_g, sp),
        "myo_hsd_mm": hausdorff_mm(myo_p, myo_g, sp),
        "inf_dice": 100.0 * dice(inf_p, inf_g),
        "inf_voldif_mm3": voldif(inf_p, inf_g, sp),
        "inf_ratio_pts": ratio_error(pred, gt, 3),
        "nr_dice": 100.0 * dice(nr_p, nr_g),
        "nr_voldif_mm3": voldif(nr_p, nr_g, sp),
        "nr_ratio_pts": ratio_error(pred, gt, 4),
    }


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregate: dict[str, float]
    excluded_cases: list[dict] = field(default_factory=list)
    hsd_not_evaluable: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        doc = {
            "columns": COLUMNS,
            "cases": [{k: clean(r[k]) for k in COLUMNS} for r in self.rows],
            "aggregate": {k: clean(v) for k, v in self.aggregate.items()},
            "excluded_cases": self.excluded_cases,
            "hsd_not_evaluable": self.hsd_not_evaluable,
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r["case_id"]] + [_fmt(r[k]) for k in METRIC_COLUMNS])
        return buf.getvalue()

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path

    def table(self) -> str:
        """Aggregate values grouped by target, one line per metric."""
        lines = [f"{'Target':<12}{'Metric':<14}{'Mean':>12}"]
        for target, col, header in TABLE_LAYOUT:
            lines.append(f"{target:<12}{header:<14}{_fmt(self.aggregate.get(col, math.nan)):>12}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    return f"{v:.6f}"


def aggregate(rows: Iterable[dict], excluded: Sequence[dict] = ()) -> MetricsReport:
    """Arithmetic means of every metric column; NaN entries (e.g. HSD) are left out of their mean."""
    rows = list(rows)
    agg = {}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in rows if not (isinstance(r[col], float) and math.isnan(r[col]))]
        agg[col] = float(np.mean(vals)) if vals else math.nan
    agg["n_cases"] = len(rows)
    missing = [r["case_id"] for r in rows if math.isnan(r["myo_hsd_mm"])]
    agg["n_hsd_excluded"] = len(missing)
    agg["n_excluded"] = len(excluded)
    return MetricsReport(rows, agg, list(excluded), missing)


def evaluate_pairs(pairs: Iterable[tuple[LabelMap, LabelMap]]) -> MetricsReport:
    """Evaluate (pred, gt) pairs; geometry mismatches are recorded and excluded."""
    rows, excluded = [], []
    for pred, gt in pairs:
        try:
            rows.append(evaluate_case(pred, gt))
        except GeometryError as exc:
            excluded.append({"case_id": gt.case_id, "error": str(exc)})
    return aggregate(rows, excluded)
