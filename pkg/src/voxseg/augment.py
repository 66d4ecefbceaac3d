"""Preprocessing and augmentation for both training regimes.

Two regimes are supported:

* ``transbts``: per-channel z-score over the whole volume, random 128^3
  crop, random flips on every axis, random per-channel intensity
  scale/shift with factor 0.1.
* ``nnunet``: per-channel z-score over the non-zero support plus
  non-zero-bounding-box cropping; training-time elastic deformation,
  isotropic scaling in [0.85, 1.25], free rotations about all axes, gamma
  correction in [0.7, 1.5], and axis mirroring.

Every transform is a pure function of (inputs, rng); spatial transforms
apply one geometric map to image and labels (trilinear for images, nearest
for labels, so the label set can only shrink).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volumes import LabelVolume, MultiModalVolume

REGIMES = ("transbts", "nnunet")

# Elastic-deformation defaults: smoothing sigma (voxels) and the upper bound
# of the uniformly drawn peak displacement (voxels).
ELASTIC_SIGMA = 6.0
ELASTIC_ALPHA_MAX = 8.0


@dataclass
class AugmentConfig:
    regime: str = "transbts"
    intensity_factor: float = 0.1
    crop_size: tuple[int, int, int] = (128, 128, 128)
    scale_range: tuple[float, float] = (0.85, 1.25)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    rotation_max_deg: float = 30.0
    elastic_enabled: bool = True
    apply_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"augment.regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 < self.intensity_factor < 1.0:
            raise ValidationError("augment.intensity_factor must lie in (0, 1)")
        if self.scale_range[0] >= self.scale_range[1]:
            raise ValidationError("augment.scale_range must be (low, high) with low < high")
        if self.gamma_range[0] >= self.gamma_range[1]:
            raise ValidationError("augment.gamma_range must be (low, high) with low < high")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValidationError("augment.apply_prob must lie in [0, 1]")
        self.crop_size = tuple(int(c) for c in self.crop_size)


def zscore_normalize(vol: MultiModalVolume, mode: str = "whole") -> MultiModalVolume:
    """Standardize each channel to zero mean / unit std.

    ``mode="whole"`` uses all voxels; ``mode="nonzero"`` restricts the
    statistics to voxels where any channel is non-zero and leaves the
    remaining background at exactly zero.
    """
    if mode not in ("whole", "nonzero"):
        raise ValidationError(f"normalize mode must be 'whole' or 'nonzero', got {mode!r}")
    data = vol.data.astype(np.float32, copy=True)
    if mode == "nonzero":
        support = np.any(vol.data != 0, axis=0)
        if not support.any():
            raise ValidationError("cannot normalize: volume has no non-zero voxels")
    else:
        support = None

    for c in range(data.shape[0]):
        chan = data[c]
        sample = chan[support] if support is not None else chan
        mean = float(sample.mean())
        std = float(sample.std())
        if std == 0.0:
            raise ValidationError(f"zero variance channel {c}: cannot z-score normalize")
        if support is not None:
            out = np.zeros_like(chan)
            out[support] = (chan[support] - mean) / std
            data[c] = out
        else:
            data[c] = (chan - mean) / std
    return MultiModalVolume(data=data, spacing=vol.spacing, case_id=vol.case_id)


def _pad_to_min(data: np.ndarray, size, spatial_offset: int, pad_value=0):
    """Symmetric zero-pad trailing spatial dims up to ``size``."""
    pads = [(0, 0)] * spatial_offset
    for dim, target in zip(data.shape[spatial_offset:], size):
        short = max(0, target - dim)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=pad_value)
    return data


def random_crop(
    vol: MultiModalVolume,
    labels: LabelVolume | None,
    size,
    rng: np.random.Generator,
) -> tuple[MultiModalVolume, LabelVolume | None]:
    """Crop image (and labels, with the identical window) to ``size``.

    Inputs smaller than ``size`` along an axis are zero-padded symmetrically
    first, so the output shape is always exactly ``size``.
    """
    size = tuple(int(s) for s in size)
    img = _pad_to_min(vol.data, size, spatial_offset=1)
    lab = _pad_to_min(labels.data, size, spatial_offset=0) if labels is not None else None

    starts = [int(rng.integers(0, dim - tgt + 1)) for dim, tgt in zip(img.shape[1:], size)]
    window = tuple(slice(s, s + tgt) for s, tgt in zip(starts, size))

    out_vol = MultiModalVolume(data=img[(slice(None),) + window].copy(),
                               spacing=vol.spacing, case_id=vol.case_id)
    if labels is None:
        return out_vol, None
    out_lab = LabelVolume(data=lab[window].copy(), spacing=labels.spacing,
                          case_id=labels.case_id)
    return out_vol, out_lab


def random_flip(
    vol: MultiModalVolume,
    labels: LabelVolume | None,
    rng: np.random.Generator,
) -> tuple[MultiModalVolume, LabelVolume | None]:
    """Independently flip each spatial axis with p = 0.5, image and labels together."""
    axes = [ax for ax in range(3) if rng.random() < 0.5]
    return _flip_axes(vol, labels, axes)


def _flip_axes(vol, labels, axes):
    img = vol.data
    lab = labels.data if labels is not None else None
    for ax in axes:
        img = np.flip(img, axis=ax + 1)
        if lab is not None:
            lab = np.flip(lab, axis=ax)
    out_vol = MultiModalVolume(data=np.ascontiguousarray(img), spacing=vol.spacing,
                               case_id=vol.case_id)
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(data=np.ascontiguousarray(lab), spacing=labels.spacing,
                              case_id=labels.case_id)
    return out_vol, out_lab


def random_intensity_shift(
    vol: MultiModalVolume,
    factor: float,
    rng: np.random.Generator,
) -> MultiModalVolume:
    """Per channel: image * U(1-f, 1+f) + U(-f, f). Labels are untouched."""
    if not 0.0 < factor < 1.0:
        raise ValidationError("intensity shift factor must lie in (0, 1)")
    data = vol.data.copy()
    for c in range(data.shape[0]):
        scale = rng.uniform(1.0 - factor, 1.0 + factor)
        shift = rng.uniform(-factor, factor)
        data[c] = data[c] * scale + shift
    return MultiModalVolume(data=data, spacing=vol.spacing, case_id=vol.case_id)


def nonzero_crop(
    vol: MultiModalVolume,
    labels: LabelVolume | None = None,
) -> tuple[MultiModalVolume, LabelVolume | None, tuple[tuple[int, int], ...]]:
    """Crop to the tight bounding box of voxels where any channel is non-zero.

    Returns the cropped volumes plus the half-open bbox ((z0, z1), (y0, y1),
    (x0, x1)) for inverse mapping.
    """
    support = np.any(vol.data != 0, axis=0)
    if not support.any():
        raise ValidationError("cannot crop: volume is all zero")
    bbox = []
    for ax in range(3):
        proj = np.any(support, axis=tuple(a for a in range(3) if a != ax))
        idx = np.nonzero(proj)[0]
        bbox.append((int(idx[0]), int(idx[-1]) + 1))
    bbox = tuple(bbox)
    window = tuple(slice(lo, hi) for lo, hi in bbox)

    out_vol = MultiModalVolume(data=vol.data[(slice(None),) + window].copy(),
                               spacing=vol.spacing, case_id=vol.case_id)
    out_lab = None
    if labels is not None:
        out_lab = LabelVolume(data=labels.data[window].copy(), spacing=labels.spacing,
                              case_id=labels.case_id)
    return out_vol, out_lab, bbox


# ---------------------------------------------------------------------------
# nnU-Net-style training augmentations
# ---------------------------------------------------------------------------

def _warp(img: np.ndarray, lab: np.ndarray | None, coords):
    """Resample image channels (trilinear) and labels (nearest) at ``coords``."""
    warped = np.stack(
        [ndimage.map_coordinates(img[c], coords, order=1, mode="constant", cval=0.0)
         for c in range(img.shape[0])]
    ).astype(np.float32)
    warped_lab = None
    if lab is not None:
        warped_lab = ndimage.map_coordinates(lab, coords, order=0, mode="constant", cval=0)
    return warped, warped_lab


def _elastic_coords(shape, rng: np.random.Generator):
    alpha = rng.uniform(0.0, ELASTIC_ALPHA_MAX)
    base = np.indices(shape, dtype=np.float64)
    coords = []
    for ax in range(3):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), ELASTIC_SIGMA)
        peak = np.abs(f).max()
        if peak > 0:
            f *= alpha / peak
        coords.append(base[ax] + f)
    return coords


def _rotation_matrix(angles_rad) -> np.ndarray:
    az, ay, ax = angles_rad
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])   # about axis 0
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])   # about axis 1
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])   # about axis 2
    return rz @ ry @ rx


def _affine_coords(shape, matrix: np.ndarray):
    """Sampling coordinates for out(o) = in(matrix @ (o - c) + c)."""
    center = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    base = np.indices(shape, dtype=np.float64).reshape(3, -1)
    mapped = matrix @ (base - center[:, None]) + center[:, None]
    return [m.reshape(shape) for m in mapped]


def _gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Per-channel gamma in normalized [0, 1] space, range restored afterwards."""
    out = img.copy()
    for c in range(img.shape[0]):
        lo, hi = float(img[c].min()), float(img[c].max())
        if hi <= lo:
            continue
        t = (img[c] - lo) / (hi - lo)
        out[c] = (t ** gamma) * (hi - lo) + lo
    return out


def nnunet_augment(
    vol: MultiModalVolume,
    labels: LabelVolume,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[MultiModalVolume, LabelVolume]:
    """Apply the nnU-Net-style augmentation stack.

    Each step fires independently with probability ``cfg.apply_prob``, in
    order: elastic deformation, isotropic scaling, rotations about all three
    axes, gamma correction (images only), axis mirroring.
    """
    if cfg.regime != "nnunet":
        raise ValidationError("nnunet_augment requires cfg.regime == 'nnunet'")
    img = vol.data
    lab = labels.data
    shape = lab.shape

    if cfg.elastic_enabled and rng.random() < cfg.apply_prob:
        img, lab = _warp(img, lab, _elastic_coords(shape, rng))

    if rng.random() < cfg.apply_prob:
        s = rng.uniform(*cfg.scale_range)
        img, lab = _warp(img, lab, _affine_coords(shape, np.eye(3) / s))

    if rng.random() < cfg.apply_prob:
        limit = np.deg2rad(cfg.rotation_max_deg)
        angles = rng.uniform(-limit, limit, size=3)
        rot = _rotation_matrix(angles)
        img, lab = _warp(img, lab, _affine_coords(shape, rot.T))

    if rng.random() < cfg.apply_prob:
        img = _gamma_correct(img, rng.uniform(*cfg.gamma_range))

    mirror_axes = [ax for ax in range(3) if rng.random() < cfg.apply_prob]
    for ax in mirror_axes:
        img = np.flip(img, axis=ax + 1)
        lab = np.flip(lab, axis=ax)

    out_vol = MultiModalVolume(data=np.ascontiguousarray(img, dtype=np.float32),
                               spacing=vol.spacing, case_id=vol.case_id)
    out_lab = LabelVolume(data=np.ascontiguousarray(lab), spacing=labels.spacing,
                          case_id=labels.case_id)
    return out_vol, out_lab


def preprocess_for_regime(
    vol: MultiModalVolume,
    labels: LabelVolume | None,
    regime: str,
):
    """One-time per-volume preprocessing for a training regime.

    transbts: whole-volume z-score. nnunet: non-zero crop, then z-score over
    the non-zero support. Returns (vol, labels, bbox-or-None).
    """
    if regime == "transbts":
        return zscore_normalize(vol, mode="whole"), labels, None
    if regime == "nnunet":
        cropped, lab, bbox = nonzero_crop(vol, labels)
        return zscore_normalize(cropped, mode="nonzero"), lab, bbox
    raise ValidationError(f"unknown regime {regime!r}")


def augment_sample(
    vol: MultiModalVolume,
    labels: LabelVolume,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[MultiModalVolume, LabelVolume]:
    """Per-step training augmentation for an already-preprocessed sample."""
    vol, labels = random_crop(vol, labels, cfg.crop_size, rng)
    if cfg.regime == "transbts":
        vol, labels = random_flip(vol, labels, rng)
        vol = random_intensity_shift(vol, cfg.intensity_factor, rng)
        return vol, labels
    return nnunet_augment(vol, labels, cfg, rng)
