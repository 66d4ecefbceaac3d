"""Model fusion and label postprocessing.

Ensembling averages member probabilities with per-class weights (the
background channel always gets uniform weights) and renormalizes, which
keeps the argmax of the weighted scores. Postprocessing runs
connected-component filtering first (off by default in the final
pipeline) and enhancing-tumor replacement second: when the total ET mass
is at or below the threshold it is relabeled as necrosis, which leaves
the TC and WT unions untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volumes import LabelVolume, ProbabilityVolume

CCA_MIN_SIZE = 15
ET_THRESHOLD = 300

_CLASS_ORDER = ("ncr", "ed", "et")
_SCOPES = ("whole_foreground", "per_class")


@dataclass(frozen=True)
class EnsembleWeights:
    """Per-class member weights for probability averaging."""

    ncr: tuple
    ed: tuple
    et: tuple

    def __post_init__(self):
        vectors = {"ncr": self.ncr, "ed": self.ed, "et": self.et}
        lengths = {len(v) for v in vectors.values()}
        if len(lengths) != 1:
            raise ValidationError(f"weight vectors differ in length: "
                                  f"{ {k: len(v) for k, v in vectors.items()} }")
        if lengths == {0}:
            raise ValidationError("weight vectors must not be empty")
        for name, vec in vectors.items():
            vec = tuple(float(w) for w in vec)
            if any(w < 0 for w in vec):
                raise ValidationError(f"{name} weights must be nonnegative, got {vec}")
            total = sum(vec)
            if abs(total - 1.0) > 1e-2:
                raise ValidationError(f"{name} weights must sum to 1, got {total}")
            # published weight sets are rounded to 3 decimals; snap the sum
            object.__setattr__(self, name, tuple(w / total for w in vec))

    @property
    def num_members(self) -> int:
        return len(self.ncr)

    @classmethod
    def uniform(cls, m: int) -> "EnsembleWeights":
        if m < 1:
            raise ValidationError(f"ensemble needs at least one member, got {m}")
        w = (1.0 / m,) * m
        return cls(ncr=w, ed=w, et=w)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleWeights":
        missing = [k for k in _CLASS_ORDER if k not in d]
        if missing:
            raise ValidationError(f"ensemble weights missing classes {missing}")
        return cls(ncr=tuple(d["ncr"]), ed=tuple(d["ed"]), et=tuple(d["et"]))

    def to_dict(self) -> dict:
        return {"ncr": list(self.ncr), "ed": list(self.ed), "et": list(self.et)}


def ensemble_average(members: list[ProbabilityVolume],
                     weights: EnsembleWeights) -> ProbabilityVolume:
    """Per-class weighted mean of member probabilities, renormalized."""
    if len(members) != weights.num_members:
        raise ValidationError(
            f"{len(members)} members but weights for {weights.num_members}")
    shapes = {m.data.shape for m in members}
    if len(shapes) != 1:
        raise ValidationError(f"member shapes differ: {sorted(shapes)}")

    m = weights.num_members
    by_channel = [
        (1.0 / m,) * m,  # background: uniform
        weights.ncr,
        weights.ed,
        weights.et,
    ]
    out = np.zeros(members[0].data.shape, dtype=np.float64)
    for c, w_c in enumerate(by_channel):
        for member, w in zip(members, w_c):
            out[c] += w * member.data[c].astype(np.float64)
    out /= out.sum(axis=0, keepdims=True)
    return ProbabilityVolume(data=out.astype(np.float32),
                             spacing=members[0].spacing,
                             case_id=members[0].case_id)


_CHANNEL_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.uint8)


def argmax_labels(probs: ProbabilityVolume) -> LabelVolume:
    """Channel argmax mapped to raw labels; ties go to the lower channel."""
    idx = np.argmax(probs.data, axis=0)
    return LabelVolume(data=_CHANNEL_TO_LABEL[idx], spacing=probs.spacing,
                       case_id=probs.case_id)


@dataclass(frozen=True)
class ComponentLabeling:
    """Dense component ids over a binary mask; 0 is background."""

    labels: np.ndarray
    sizes: dict
    connectivity: int

    @property
    def num_components(self) -> int:
        return len(self.sizes)


def _structure(connectivity: int):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValidationError(f"mask must be 3D, got shape {mask.shape}")
    labels, k = ndimage.label(mask != 0, structure=_structure(connectivity))
    counts = np.bincount(labels.ravel(), minlength=k + 1)
    sizes = {i: int(counts[i]) for i in range(1, k + 1)}
    return ComponentLabeling(labels=labels, sizes=sizes, connectivity=connectivity)


def remove_small_components(labels: LabelVolume, min_size: int = CCA_MIN_SIZE,
                            connectivity: int = 26,
                            scope: str = "whole_foreground") -> LabelVolume:
    """Zero out components with fewer than min_size voxels.

    whole_foreground analyses the union of all tumor classes; per_class
    analyses each class mask separately.
    """
    if scope not in _SCOPES:
        raise ValidationError(f"scope must be one of {_SCOPES}, got {scope!r}")
    if min_size < 0:
        raise ValidationError(f"min_size must be >= 0, got {min_size}")
    data = labels.data.copy()
    if scope == "whole_foreground":
        comp = connected_components(data > 0, connectivity)
        for cid, size in comp.sizes.items():
            if size < min_size:
                data[comp.labels == cid] = 0
    else:
        for value in (1, 2, 4):
            comp = connected_components(data == value, connectivity)
            for cid, size in comp.sizes.items():
                if size < min_size:
                    data[comp.labels == cid] = 0
    return LabelVolume(data=data, spacing=labels.spacing, case_id=labels.case_id)


def et_replacement(labels: LabelVolume, threshold: int = ET_THRESHOLD) -> LabelVolume:
    """Relabel all enhancing tumor as necrosis when its total voxel count
    is positive and does not exceed the threshold."""
    if threshold < 0:
        raise ValidationError(f"threshold must be >= 0, got {threshold}")
    data = labels.data.copy()
    count = int((data == 4).sum())
    if 0 < count <= threshold:
        data[data == 4] = 1
    return LabelVolume(data=data, spacing=labels.spacing, case_id=labels.case_id)


def apply_postprocessing(labels: LabelVolume, *, cca_enabled: bool = False,
                         cca_min_size: int = CCA_MIN_SIZE,
                         cca_connectivity: int = 26,
                         cca_scope: str = "whole_foreground",
                         et_enabled: bool = True,
                         et_threshold: int = ET_THRESHOLD) -> LabelVolume:
    """Full postprocessing chain: component filtering, then ET replacement."""
    out = labels
    if cca_enabled:
        out = remove_small_components(out, cca_min_size, cca_connectivity, cca_scope)
    if et_enabled:
        out = et_replacement(out, et_threshold)
    return out
