"""Region composition and per-case evaluation metrics.

Regions follow the nested convention: whole tumor is every tumor label,
tumor core drops the edema, enhancing tumor is label 4 alone. Surface
distances use face-neighbor (6-connectivity) boundaries and voxel-center
distances under anisotropic spacing; the reported value is the 95th
percentile (linear interpolation) of the combined bidirectional set.

Metrics that are undefined for a case (empty masks, no negatives) are
reported as None and excluded from aggregate means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import LabelMap, validate_labels
from .errors import ShapeMismatch

REGIONS = ("et", "wt", "tc")


@dataclass
class RegionMasks:
    et: np.ndarray
    wt: np.ndarray
    tc: np.ndarray

    def get(self, region: str) -> np.ndarray:
        return getattr(self, region)


@dataclass
class RegionScores:
    dice: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    hausdorff95: float | None = None


@dataclass
class CaseReport:
    case_id: str
    scores: dict[str, RegionScores]

    def mean_dice(self) -> float | None:
        vals = [self.scores[r].dice for r in REGIONS if self.scores[r].dice is not None]
        return float(np.mean(vals)) if vals else None


def region_masks(l: LabelMap | np.ndarray) -> RegionMasks:
    grid = l.labels if isinstance(l, LabelMap) else np.asarray(l)
    validate_labels(grid)
    return RegionMasks(
        et=grid == 4,
        wt=np.isin(grid, (1, 2, 4)),
        tc=np.isin(grid, (1, 4)),
    )


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float | None, float | None, float | None]:
    """(dice, sensitivity, specificity) from confusion counts.

    Conventions: both masks empty gives dice 1 with sensitivity undefined;
    an all-positive ground truth leaves specificity undefined.
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn

    dice = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    sensitivity = None if (tp + fn) == 0 else tp / (tp + fn)
    specificity = None if (tn + fp) == 0 else tn / (tn + fp)
    return dice, sensitivity, specificity


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background or out-of-bounds face neighbor."""
    m = mask.astype(bool)
    interior = np.ones_like(m)
    for axis in range(m.ndim):
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        shifted_fwd = np.zeros_like(m)
        shifted_bwd = np.zeros_like(m)
        shifted_fwd[tuple(hi)] = m[tuple(lo)]
        shifted_bwd[tuple(lo)] = m[tuple(hi)]
        interior &= shifted_fwd & shifted_bwd
    return m & ~interior


def hausdorff95(pred: np.ndarray, gt: np.ndarray, spacing) -> float | None:
    """95th percentile of bidirectional surface distances; None if a mask is empty."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary_voxels(pred)).astype(np.float64) * sp
    b = np.argwhere(boundary_voxels(gt)).astype(np.float64) * sp
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def evaluate_case(
    pred_labels: LabelMap | np.ndarray,
    gt_labels: LabelMap | np.ndarray,
    spacing,
    case_id: str = "",
) -> CaseReport:
    pred_grid = pred_labels.labels if isinstance(pred_labels, LabelMap) else pred_labels
    gt_grid = gt_labels.labels if isinstance(gt_labels, LabelMap) else gt_labels
    if pred_grid.shape != gt_grid.shape:
        raise ShapeMismatch(f"label shapes differ: {pred_grid.shape} vs {gt_grid.shape}")
    pred_m = region_masks(pred_labels if isinstance(pred_labels, LabelMap) else pred_grid)
    gt_m = region_masks(gt_labels if isinstance(gt_labels, LabelMap) else gt_grid)
    scores = {}
    for region in REGIONS:
        p, g = pred_m.get(region), gt_m.get(region)
        dice, sens, spec = overlap_metrics(p, g)
        scores[region] = RegionScores(
            dice=dice,
            sensitivity=sens,
            specificity=spec,
            hausdorff95=hausdorff95(p, g, spacing),
        )
    return CaseReport(case_id=case_id, scores=scores)


# ---------------------------------------------------------------------------
# Aggregation and CSV report
# ---------------------------------------------------------------------------


def _mean_defined(values) -> tuple[float | None, int]:
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)) if vals else None, len(vals))


def aggregate(reports: list[CaseReport]) -> dict[str, RegionScores]:
    """Arithmetic mean of defined values per region across cases."""
    agg = {}
    for region in REGIONS:
        agg[region] = RegionScores(
            dice=_mean_defined(r.scores[region].dice for r in reports)[0],
            sensitivity=_mean_defined(r.scores[region].sensitivity for r in reports)[0],
            specificity=_mean_defined(r.scores[region].specificity for r in reports)[0],
            hausdorff95=_mean_defined(r.scores[region].hausdorff95 for r in reports)[0],
        )
    return agg


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.6f}"


def write_report(reports: list[CaseReport], path) -> None:
    """One row per (case, region), then aggregate rows and the mean-dice row."""
    agg = aggregate(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "region", "dice", "sensitivity", "specificity", "hausdorff95"])
        for r in reports:
            for region in REGIONS:
                s = r.scores[region]
                writer.writerow(
                    [r.case_id, region, _fmt(s.dice), _fmt(s.sensitivity),
                     _fmt(s.specificity), _fmt(s.hausdorff95)]
                )
        for region in REGIONS:
            s = agg[region]
            writer.writerow(
                ["aggregate", region, _fmt(s.dice), _fmt(s.sensitivity),
                 _fmt(s.specificity), _fmt(s.hausdorff95)]
            )
        mean_dice, _ = _mean_defined(agg[r].dice for r in REGIONS)
        writer.writerow(["aggregate", "mean", _fmt(mean_dice), "", "", ""])


def write_dice_summary(reports: list[CaseReport], path) -> None:
    """Per-case and aggregate rows with mean/ET/WT/TC dice columns."""
    agg = aggregate(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "mean_dice", "et_dice", "wt_dice", "tc_dice"])
        for r in reports:
            writer.writerow(
                [r.case_id, _fmt(r.mean_dice())]
                + [_fmt(r.scores[region].dice) for region in REGIONS]
            )
        mean_dice, _ = _mean_defined(agg[region].dice for region in REGIONS)
        writer.writerow(
            ["aggregate", _fmt(mean_dice)] + [_fmt(agg[region].dice) for region in REGIONS]
        )
