"""Whole-volume prediction: overlapping patch tiling, merge strategies,
and test-time augmentation.

Patch anchors per axis of length L with patch size P: n = ceil(L/P)
tiles; a single tile sits at 0 (the volume is zero-padded up to P if
shorter); otherwise start_i = round(i*(L-P)/(n-1)), so the first tile is
pinned to 0 and the last to L-P. A 240x240x155 volume at P=128 yields
the eight overlapping regions {0,112} x {0,112} x {0,27}.

Merging is later-wins by default: patches are written in row-major grid
order and each overwrites its window, so intersections carry the later
patch's prediction. TTA members pair a spatial transform of the input
with its exact inverse on the probability map; member probabilities are
averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import _gamma_correct, preprocess_for_regime
from .errors import ValidationError
from .volumes import MultiModalVolume, ProbabilityVolume

DEFAULT_PATCH_SIZE = (128, 128, 128)

TTA_VARIANTS = ("none", "whd_flips", "whd_flips_rot", "whd_flips_rot_gamma",
                "all_flips_rot")

MERGE_STRATEGIES = ("later_wins", "average")


@dataclass(frozen=True)
class PatchGrid:
    """Tiling plan over a volume (trailing zero-pad when an axis < P)."""

    volume_shape: tuple
    patch_size: tuple
    starts: tuple
    pad: tuple  # (before, after) per axis; before is always 0

    @property
    def padded_shape(self) -> tuple:
        return tuple(s + lo + hi for s, (lo, hi) in zip(self.volume_shape, self.pad))


def _axis_anchors(length: int, patch: int) -> list[int]:
    n = math.ceil(length / patch)
    if n == 1:
        return [0]
    return [int(round(i * (length - patch) / (n - 1))) for i in range(n)]


def plan_patch_grid(shape, patch_size=DEFAULT_PATCH_SIZE) -> PatchGrid:
    shape = tuple(int(s) for s in shape)
    patch_size = tuple(int(p) for p in patch_size)
    if len(shape) != 3 or len(patch_size) != 3:
        raise ValidationError("plan_patch_grid expects 3D shape and patch size")
    if any(s < 1 for s in shape) or any(p < 1 for p in patch_size):
        raise ValidationError(f"invalid shape {shape} or patch size {patch_size}")
    anchors = [_axis_anchors(s, p) for s, p in zip(shape, patch_size)]
    starts = tuple((z, y, x) for z in anchors[0] for y in anchors[1] for x in anchors[2])
    pad = tuple((0, max(p - s, 0)) for s, p in zip(shape, patch_size))
    return PatchGrid(volume_shape=shape, patch_size=patch_size, starts=starts, pad=pad)


def _patch_window(start, patch_size):
    return tuple(slice(s, s + p) for s, p in zip(start, patch_size))


def merge_patches(grid: PatchGrid, patch_outputs: Sequence[np.ndarray],
                  strategy: str = "later_wins", spacing=(1.0, 1.0, 1.0),
                  case_id: str = "") -> ProbabilityVolume:
    """Fuse per-patch probability maps back into one volume."""
    if strategy not in MERGE_STRATEGIES:
        raise ValidationError(f"unknown merge strategy {strategy!r}")
    if len(patch_outputs) != len(grid.starts):
        raise ValidationError(
            f"expected {len(grid.starts)} patch outputs, got {len(patch_outputs)}")
    expected = (4,) + grid.patch_size
    for i, p in enumerate(patch_outputs):
        if p.shape != expected:
            raise ValidationError(
                f"patch {i} has shape {p.shape}, expected {expected}")

    padded = (4,) + grid.padded_shape
    if strategy == "later_wins":
        out = np.zeros(padded, dtype=np.float64)
        for start, patch in zip(grid.starts, patch_outputs):
            out[(slice(None),) + _patch_window(start, grid.patch_size)] = patch
    else:
        out = np.zeros(padded, dtype=np.float64)
        counts = np.zeros(grid.padded_shape, dtype=np.float64)
        for start, patch in zip(grid.starts, patch_outputs):
            win = _patch_window(start, grid.patch_size)
            out[(slice(None),) + win] += patch
            counts[win] += 1.0
        out /= counts[None]
        out /= out.sum(axis=0, keepdims=True)

    crop = tuple(slice(0, s) for s in grid.volume_shape)
    data = out[(slice(None),) + crop].astype(np.float32)
    return ProbabilityVolume(data=data, spacing=spacing, case_id=case_id)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


class TorchPredictor:
    """Adapts a frozen torch model to the numpy patch-predictor protocol:
    float32 (4,D,H,W) in, float32 logits of the same shape out."""

    def __init__(self, model: torch.nn.Module):
        self.model = model.eval()

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)).unsqueeze(0)
        with torch.no_grad():
            logits = self.model(x)
        return logits.squeeze(0).numpy().astype(np.float32)


@dataclass(frozen=True)
class TtaMember:
    """One test-time augmentation member.

    spatial_forward permutes voxels of the input; spatial_inverse is its
    exact inverse, applied to the probability map. intensity (optional)
    acts on the input only and needs no inverse.
    """

    name: str
    spatial_forward: Callable = field(default=lambda a: a)
    spatial_inverse: Callable = field(default=lambda a: a)
    intensity: Callable | None = None

    def transform_input(self, arr: np.ndarray) -> np.ndarray:
        out = self.spatial_forward(arr)
        if self.intensity is not None:
            out = self.intensity(out)
        return out


def _flip_member(axes) -> TtaMember:
    spatial = tuple(a + 1 for a in axes)
    name = "flip_" + "".join("dhw"[a] for a in axes)
    fwd = lambda a: np.flip(a, spatial).copy()
    return TtaMember(name=name, spatial_forward=fwd, spatial_inverse=fwd)


def _rot_member(k: int) -> TtaMember:
    # axial-plane rotation: the first two spatial axes
    return TtaMember(
        name=f"rot90_{k}",
        spatial_forward=lambda a, k=k: np.rot90(a, k, axes=(1, 2)).copy(),
        spatial_inverse=lambda a, k=k: np.rot90(a, -k, axes=(1, 2)).copy(),
    )


def _gamma_member(g: float) -> TtaMember:
    return TtaMember(name=f"gamma_{g}", intensity=lambda a, g=g: _gamma_correct(a, g))


def tta_members(variant: str) -> list[TtaMember]:
    if variant not in TTA_VARIANTS:
        raise ValidationError(f"unknown TTA variant {variant!r}")
    identity = TtaMember(name="identity")
    if variant == "none":
        return [identity]
    if variant == "all_flips_rot":
        members = [identity]
        members += [_flip_member(axes) for axes in
                    [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]]
        members += [_rot_member(k) for k in (1, 2, 3)]
        return members
    members = [identity] + [_flip_member((a,)) for a in (0, 1, 2)]
    if variant in ("whd_flips_rot", "whd_flips_rot_gamma"):
        members += [_rot_member(k) for k in (1, 2, 3)]
    if variant == "whd_flips_rot_gamma":
        members += [_gamma_member(0.8), _gamma_member(1.2)]
    return members


def _tiled_probabilities(predictor, data: np.ndarray, patch_size,
                         merge_strategy: str) -> np.ndarray:
    """Tile, predict, softmax, merge; returns a (4,D,H,W) float array."""
    grid = plan_patch_grid(data.shape[1:], patch_size)
    padded = np.pad(data, ((0, 0),) + grid.pad)
    outputs = []
    for start in grid.starts:
        window = (slice(None),) + _patch_window(start, grid.patch_size)
        logits = predictor(padded[window])
        outputs.append(softmax_channels(np.asarray(logits, dtype=np.float64)))
    merged = merge_patches(grid, outputs, strategy=merge_strategy)
    return merged.data


def tta_predict(predictor, vol: MultiModalVolume, variant: str,
                patch_size=DEFAULT_PATCH_SIZE,
                merge_strategy: str = "later_wins") -> ProbabilityVolume:
    """Average tiled predictions over the TTA members of ``variant``."""
    members = tta_members(variant)
    if len(members) == 1:
        probs = _tiled_probabilities(predictor, vol.data, patch_size, merge_strategy)
        return ProbabilityVolume(data=probs.astype(np.float32), spacing=vol.spacing,
                                 case_id=vol.case_id)
    acc = None
    for member in members:
        transformed = member.transform_input(vol.data)
        probs = _tiled_probabilities(predictor, transformed, patch_size,
                                     merge_strategy)
        probs = member.spatial_inverse(probs)
        acc = probs.astype(np.float64) if acc is None else acc + probs
    acc /= len(members)
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityVolume(data=acc.astype(np.float32), spacing=vol.spacing,
                             case_id=vol.case_id)


def predict_volume(predictor, vol: MultiModalVolume,
                   patch_size=DEFAULT_PATCH_SIZE, tta: str = "none",
                   merge_strategy: str = "later_wins") -> ProbabilityVolume:
    """Tiled whole-volume prediction of an already-normalized input."""
    if tta != "none":
        return tta_predict(predictor, vol, tta, patch_size, merge_strategy)
    probs = _tiled_probabilities(predictor, vol.data, patch_size, merge_strategy)
    return ProbabilityVolume(data=probs.astype(np.float32), spacing=vol.spacing,
                             case_id=vol.case_id)


def predict_case(predictor, vol: MultiModalVolume, regime: str = "transbts",
                 patch_size=DEFAULT_PATCH_SIZE, tta: str = "none",
                 merge_strategy: str = "later_wins") -> ProbabilityVolume:
    """Regime preprocessing plus prediction, restored to the input shape.

    The nnunet regime crops to the non-zero bounding box before
    predicting; voxels outside the box are emitted as certain background.
    """
    pre_vol, _, bbox = preprocess_for_regime(vol, None, regime)
    probs = predict_volume(predictor, pre_vol, patch_size, tta, merge_strategy)
    if bbox is None:
        return probs
    full = np.zeros((4,) + vol.data.shape[1:], dtype=np.float32)
    full[0] = 1.0
    window = (slice(None),) + tuple(slice(lo, hi) for lo, hi in bbox)
    full[window] = probs.data
    return ProbabilityVolume(data=full, spacing=vol.spacing, case_id=vol.case_id)
