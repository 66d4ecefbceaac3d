"""Volume containers, label semantics, and file I/O.

All voxel data lives in a single channel-first convention:

* images           -> float32 ``(4, D, H, W)`` (FLAIR, T1, T1ce, T2)
* label maps       -> uint8   ``(D, H, W)`` with values in {0, 1, 2, 4}
* probability maps -> float32 ``(4, D, H, W)`` (background, NCR, ED, ET)

Two on-disk formats are supported: NIfTI-1 (``.nii`` / ``.nii.gz``) and a
tiny raw format (``.v3d``) so the test suite never depends on NIfTI
tooling. Round-trips through either format are bit-exact.

Containers validate their invariants at construction and should be treated
as immutable afterwards; every operation here is a pure function.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import ValidationError

#: Legal label values: background, necrotic core, edema, enhancing tumor.
VALID_LABELS = (0, 1, 2, 4)

Spacing = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be 3 positive floats, got {spacing}")
    return spacing


@dataclass
class MultiModalVolume:
    """4-channel float voxel grid with per-axis spacing in millimetres."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValidationError(
                f"image volume must have shape (4, D, H, W), got {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            raise ValidationError("image volume contains non-finite values")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self):
        """Spatial shape (D, H, W)."""
        return self.data.shape[1:]


@dataclass
class LabelVolume:
    """Integer voxel grid over the label set {0, 1 (NCR), 2 (ED), 4 (ET)}."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"label volume must be rank 3, got shape {data.shape}")
        illegal = np.setdiff1d(np.unique(data), VALID_LABELS)
        if illegal.size:
            raise ValidationError(f"illegal label {int(illegal[0])}")
        self.data = data.astype(np.uint8, copy=False)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class ProbabilityVolume:
    """Per-class probabilities, channel order (background, NCR, ED, ET)."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValidationError(
                f"probability volume must have shape (4, D, H, W), got {self.data.shape}"
            )
        if self.data.min() < -1e-6 or self.data.max() > 1.0 + 1e-6:
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = self.data.sum(axis=0)
        err = float(np.abs(sums - 1.0).max())
        if err > 1e-4:
            raise ValidationError(f"per-voxel channel sums deviate from 1 by {err:.2e}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass
class RegionMasks:
    """Nested evaluation regions: enhancing tumor ⊆ tumor core ⊆ whole tumor."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        self.et = np.asarray(self.et, dtype=bool)
        self.tc = np.asarray(self.tc, dtype=bool)
        self.wt = np.asarray(self.wt, dtype=bool)
        if not (self.et.shape == self.tc.shape == self.wt.shape):
            raise ValidationError("region masks must share one shape")
        if (self.et & ~self.tc).any() or (self.tc & ~self.wt).any():
            raise ValidationError("region masks must nest: et ⊆ tc ⊆ wt")

    def as_dict(self):
        return {"et": self.et, "tc": self.tc, "wt": self.wt}


def region_decompose(labels: LabelVolume) -> RegionMasks:
    """Split a label map into the three evaluated regions.

    ET = label 4, TC = labels {1, 4}, WT = labels {1, 2, 4}.
    """
    d = labels.data
    et = d == 4
    tc = et | (d == 1)
    wt = tc | (d == 2)
    return RegionMasks(et=et, tc=tc, wt=wt)


# ---------------------------------------------------------------------------
# Raw .v3d format: magic "V3D1", uint8 dtype code (0=float32, 1=uint8),
# uint32 LE rank, rank x uint32 dims, 3 x float32 spacing, row-major payload.
# ---------------------------------------------------------------------------

_V3D_MAGIC = b"V3D1"
_V3D_FLOAT32 = 0
_V3D_UINT8 = 1


def _write_v3d(path, data: np.ndarray, spacing: Spacing) -> None:
    data = np.asarray(data)
    if data.dtype == np.float32:
        code, payload = _V3D_FLOAT32, data.astype("<f4", copy=False)
    elif data.dtype == np.uint8:
        code, payload = _V3D_UINT8, data
    else:
        raise ValidationError(f"unsupported dtype for .v3d output: {data.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as f:
            f.write(_V3D_MAGIC)
            f.write(struct.pack("<B", code))
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(struct.pack("<3f", *spacing))
            f.write(np.ascontiguousarray(payload).tobytes())
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc}") from exc


def _read_v3d(path) -> tuple[np.ndarray, Spacing]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ValidationError(f"unreadable file {path}: {exc}") from exc
    if raw[:4] != _V3D_MAGIC:
        raise ValidationError(f"{path}: bad .v3d magic")
    (code,) = struct.unpack_from("<B", raw, 4)
    (rank,) = struct.unpack_from("<I", raw, 5)
    if rank < 1 or rank > 8:
        raise ValidationError(f"{path}: implausible .v3d rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    spacing = struct.unpack_from("<3f", raw, 9 + 4 * rank)
    offset = 9 + 4 * rank + 12
    if code == _V3D_FLOAT32:
        dtype = np.dtype("<f4")
    elif code == _V3D_UINT8:
        dtype = np.dtype(np.uint8)
    else:
        raise ValidationError(f"{path}: unknown .v3d dtype code {code}")
    count = int(np.prod(dims))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if data.size != count:
        raise ValidationError(f"{path}: truncated .v3d payload")
    data = data.reshape(dims)
    if dtype.byteorder == "<" and dtype.kind == "f":
        data = np.ascontiguousarray(data, dtype=np.float32)
    else:
        data = np.ascontiguousarray(data)
    return data, tuple(float(s) for s in spacing)


def _read_any(path) -> tuple[np.ndarray, Spacing]:
    name = str(path)
    if name.endswith(".v3d"):
        return _read_v3d(path)
    if name.endswith((".nii", ".nii.gz")):
        return nifti.read_nifti(path)
    raise ValidationError(f"unrecognized volume extension: {name}")


def _write_any(path, data: np.ndarray, spacing: Spacing) -> None:
    name = str(path)
    if name.endswith(".v3d"):
        _write_v3d(path, data, spacing)
    elif name.endswith((".nii", ".nii.gz")):
        nifti.write_nifti(path, data, spacing)
    else:
        raise ValidationError(f"unrecognized volume extension: {name}")


def load_volume(path, kind: str, case_id: str | None = None):
    """Load a volume file as a :class:`MultiModalVolume` or :class:`LabelVolume`.

    ``kind`` must be "image" or "label"; images must carry exactly 4
    channels, label values are validated against {0, 1, 2, 4}. case_id
    defaults to the filename minus its extension.
    """
    if not Path(path).is_file():
        raise ValidationError(f"no such file: {path}")
    data, spacing = _read_any(path)
    if case_id is None:
        case_id = _case_id_from(path)
    if kind == "image":
        if data.ndim != 4 or data.shape[0] != 4:
            raise ValidationError(
                f"{path}: expected 4-channel image volume, got shape {data.shape}"
            )
        return MultiModalVolume(data=data.astype(np.float32, copy=False),
                                spacing=spacing, case_id=case_id)
    if kind == "label":
        if data.ndim != 3:
            raise ValidationError(f"{path}: expected rank-3 label volume, got {data.shape}")
        return LabelVolume(data=data, spacing=spacing, case_id=case_id)
    raise ValidationError(f"kind must be 'image' or 'label', got {kind!r}")


def load_probability_volume(path, case_id: str | None = None) -> ProbabilityVolume:
    if not Path(path).is_file():
        raise ValidationError(f"no such file: {path}")
    data, spacing = _read_any(path)
    if case_id is None:
        case_id = _case_id_from(path)
    return ProbabilityVolume(data=data, spacing=spacing, case_id=case_id)


def save_volume(vol: MultiModalVolume, path) -> None:
    _write_any(path, vol.data, vol.spacing)


def save_label_volume(vol: LabelVolume, path) -> None:
    _write_any(path, vol.data, vol.spacing)


def save_probability_volume(vol: ProbabilityVolume, path) -> None:
    _write_any(path, vol.data, vol.spacing)


def _case_id_from(path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".v3d"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name
