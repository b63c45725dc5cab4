"""Overlap and surface-distance evaluation metrics: DC, DG, VOE, RVD, ASSD, MSD, RMSD."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from dmseg.distance import squared_distance_to_seeds
from dmseg.errors import InvalidArgumentError, ShapeError
from dmseg.volume import boundary_mask


def _binary_pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred) > 0
    ref = np.asarray(ref) > 0
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    return pred, ref


def dice_per_case(pred, ref) -> float:
    pred, ref = _binary_pair(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & ref).sum()) / total


def dice_global(cases) -> float:
    """Dice over voxel counts pooled across all ``(pred, ref)`` cases."""
    cases = list(cases)
    if not cases:
        raise InvalidArgumentError("dice_global needs at least one case")
    inter = 0
    total = 0
    for pred, ref in cases:
        pred, ref = _binary_pair(pred, ref)
        inter += int((pred & ref).sum())
        total += int(pred.sum()) + int(ref.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def voe_rvd(pred, ref) -> tuple[float, float]:
    """Volumetric overlap error and signed relative volume difference ``(|P|-|R|)/|R|``.

    Both empty gives ``(0, 0)``; an empty reference with a non-empty
    prediction gives ``(1, nan)``.
    """
    pred, ref = _binary_pair(pred, ref)
    n_pred, n_ref = int(pred.sum()), int(ref.sum())
    union = int((pred | ref).sum())
    if union == 0:
        return 0.0, 0.0
    voe = 1.0 - int((pred & ref).sum()) / union
    rvd = (n_pred - n_ref) / n_ref if n_ref else math.nan
    return voe, rvd


@dataclass
class SurfaceDistances:
    assd_mm: float
    msd_mm: float
    rmsd_mm: float
    degenerate: bool = False


def surface_points(mask) -> np.ndarray:
    """Inner-boundary voxels of a binary mask (6-neighbourhood)."""
    return boundary_mask((np.asarray(mask) > 0).astype(np.uint8), 1)


def directed_surface_distances(from_surface: np.ndarray, to_surface: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from every voxel of ``from_surface`` to the nearest of ``to_surface``."""
    sq = squared_distance_to_seeds(to_surface, spacing)
    return np.sqrt(sq[from_surface])


def surface_distances(pred, ref, spacing=(1.0, 1.0, 1.0)) -> SurfaceDistances:
    pred, ref = _binary_pair(pred, ref)
    s_pred, s_ref = surface_points(pred), surface_points(ref)
    has_pred, has_ref = bool(s_pred.any()), bool(s_ref.any())
    if not (has_pred and has_ref):
        if not pred.any() and not ref.any() or (pred == ref).all():
            return SurfaceDistances(0.0, 0.0, 0.0, degenerate=True)
        diag = float(np.sqrt(sum((n * s) ** 2 for n, s in zip(pred.shape, spacing))))
        return SurfaceDistances(diag, diag, diag, degenerate=True)
    d = np.concatenate([
        directed_surface_distances(s_pred, s_ref, spacing),
        directed_surface_distances(s_ref, s_pred, spacing),
    ])
    return SurfaceDistances(float(d.mean()), float(d.max()), float(np.sqrt((d * d).mean())))


@dataclass
class CaseMetrics:
    case_id: str
    dc: float
    voe: float
    rvd: float
    assd_mm: float
    msd_mm: float
    rmsd_mm: float
    degenerate_flag: bool = False


@dataclass
class MetricsReport:
    per_case: list[CaseMetrics] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_case": [asdict(c) for c in self.per_case], "aggregate": dict(self.aggregate)}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_json_safe(self.to_dict()), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        cols = ["case_id", "dc", "dg", "voe", "rvd", "assd_mm", "msd_mm", "rmsd_mm", "degenerate"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for c in self.per_case:
                writer.writerow([c.case_id, c.dc, "", c.voe, c.rvd, c.assd_mm, c.msd_mm, c.rmsd_mm,
                                 int(c.degenerate_flag)])
            a = self.aggregate
            writer.writerow(["aggregate", a["dc_mean"], a["dg"], a["voe_mean"], a["rvd_mean"],
                             a["assd_mean"], a["msd_mean"], a["rmsd_mean"], a["degenerate_count"]])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def evaluate_case(case_id, pred, ref, spacing=(1.0, 1.0, 1.0)) -> CaseMetrics:
    dc = dice_per_case(pred, ref)
    voe, rvd = voe_rvd(pred, ref)
    sd = surface_distances(pred, ref, spacing)
    degenerate = sd.degenerate or math.isnan(rvd) or not np.any(np.asarray(ref) > 0)
    return CaseMetrics(str(case_id), dc, voe, rvd, sd.assd_mm, sd.msd_mm, sd.rmsd_mm, degenerate)


def _mean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def evaluate(cases, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    """Score ``(case_id, pred, ref)`` triples; aggregates run in input order."""
    cases = list(cases)
    per_case = [evaluate_case(cid, p, r, spacing) for cid, p, r in cases]
    if not per_case:
        return MetricsReport([], {})
    aggregate = {
        "dc_mean": _mean(c.dc for c in per_case),
        "dg": dice_global((p, r) for _, p, r in cases),
        "voe_mean": _mean(c.voe for c in per_case),
        "rvd_mean": _mean(c.rvd for c in per_case),
        "assd_mean": _mean(c.assd_mm for c in per_case),
        "msd_mean": _mean(c.msd_mm for c in per_case),
        "rmsd_mean": _mean(c.rmsd_mm for c in per_case),
        "degenerate_count": sum(c.degenerate_flag for c in per_case),
    }
    return MetricsReport(per_case, aggregate)
