"""Challenge metrics: per-region Dice, 95th-percentile Hausdorff
distance, sensitivity and specificity, plus batch evaluation reports.

Empty-mask conventions follow the challenge evaluator: both masks empty
gives (dice 1, hd95 0); exactly one empty gives (dice 0, hd95 373.1287).
Surfaces are foreground voxels with at least one 6-neighbor outside the
mask (array borders count as outside), distances are Euclidean in
spacing-scaled millimeters, and the percentile uses linear interpolation
between order statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ValidationError
from .volumes import LabelVolume, region_decompose

HD95_PENALTY = 373.1287

REGION_NAMES = ("et", "tc", "wt")
LABEL_NAMES = ("ncr", "ed", "et")

_METRIC_KEYS = ("dice", "hd95", "sensitivity", "specificity")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


_SURFACE_STRUCT = ndimage.generate_binary_structure(3, 1)


def binary_surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbor outside the mask (the array
    border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SURFACE_STRUCT, border_value=0)
    return mask & ~eroded


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be positive, got {spacing}")
    empty_a, empty_b = not a.any(), not b.any()
    if empty_a and empty_b:
        return 0.0
    if empty_a or empty_b:
        return HD95_PENALTY

    pa = np.argwhere(binary_surface(a)) * np.asarray(spacing)
    pb = np.argwhere(binary_surface(b)) * np.asarray(spacing)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95))


def sensitivity_specificity(pred: np.ndarray, gt: np.ndarray) -> tuple:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.logical_and(pred, gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    tn = int(np.logical_and(~pred, ~gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    if tp + fn == 0:
        sensitivity = 1.0 if fp == 0 else 0.0
    else:
        sensitivity = tp / (tp + fn)
    specificity = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return sensitivity, specificity


@dataclass(frozen=True)
class RegionMetrics:
    dice: float
    hd95: float
    sensitivity: float
    specificity: float

    def to_dict(self) -> dict:
        return {"dice": self.dice, "hd95": self.hd95,
                "sensitivity": self.sensitivity, "specificity": self.specificity}


@dataclass(frozen=True)
class MetricsReport:
    case_id: str
    scores: dict  # region/label name -> RegionMetrics
    mode: str = "regions"

    def to_dict(self) -> dict:
        out = {"case_id": self.case_id}
        out.update({name: rm.to_dict() for name, rm in self.scores.items()})
        return out


def _region_masks(labels: LabelVolume, mode: str) -> dict:
    if mode == "regions":
        masks = region_decompose(labels)
        return {"et": masks.et, "tc": masks.tc, "wt": masks.wt}
    if mode == "labels":
        return {"ncr": labels.data == 1, "ed": labels.data == 2,
                "et": labels.data == 4}
    raise ValidationError(f"mode must be 'regions' or 'labels', got {mode!r}")


def evaluate_case(pred: LabelVolume, gt: LabelVolume,
                  mode: str = "regions") -> MetricsReport:
    if pred.data.shape != gt.data.shape:
        raise ValidationError(
            f"prediction shape {pred.data.shape} does not match "
            f"ground truth {gt.data.shape}")
    pred_masks = _region_masks(pred, mode)
    gt_masks = _region_masks(gt, mode)
    scores = {}
    for name in pred_masks:
        p, g = pred_masks[name], gt_masks[name]
        sens, spec = sensitivity_specificity(p, g)
        scores[name] = RegionMetrics(
            dice=dice(p, g),
            hd95=hd95(p, g, spacing=gt.spacing),
            sensitivity=sens,
            specificity=spec,
        )
    return MetricsReport(case_id=gt.case_id or pred.case_id, scores=scores,
                         mode=mode)


@dataclass(frozen=True)
class SetReport:
    cases: tuple
    mean: dict  # name -> RegionMetrics
    mode: str = "regions"

    def to_dict(self) -> dict:
        return {
            "cases": [c.to_dict() for c in self.cases],
            "mean": {name: rm.to_dict() for name, rm in self.mean.items()},
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def format_table(self) -> str:
        names = list(self.mean)
        short = {"dice": "dice", "hd95": "hd95", "sensitivity": "sens",
                 "specificity": "spec"}
        header = ["case".ljust(20)]
        for name in names:
            for key in _METRIC_KEYS:
                header.append(f"{name}_{short[key]}".rjust(12))
        lines = ["".join(header)]
        rows = [(c.case_id, c.scores) for c in self.cases] + [("mean", self.mean)]
        for case_id, scores in rows:
            cells = [str(case_id)[:20].ljust(20)]
            for name in names:
                rm = scores[name]
                for key in _METRIC_KEYS:
                    cells.append(f"{getattr(rm, key):12.4f}")
            lines.append("".join(cells))
        return "\n".join(lines)


def evaluate_set(pairs, mode: str = "regions") -> SetReport:
    """Evaluate (pred, gt) pairs and aggregate per-region means."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no cases to evaluate")
    cases = [evaluate_case(pred, gt, mode) for pred, gt in pairs]
    names = list(cases[0].scores)
    mean = {}
    for name in names:
        mean[name] = RegionMetrics(**{
            key: float(np.mean([getattr(c.scores[name], key) for c in cases]))
            for key in _METRIC_KEYS
        })
    return SetReport(cases=tuple(cases), mean=mean, mode=mode)
