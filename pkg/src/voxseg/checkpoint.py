"""Checkpoint archive format.

A checkpoint is a zip archive holding ``manifest.json`` plus one raw
little-endian binary per tensor under ``tensors/``. The manifest records a
format version, the checkpoint kind ("segmentation", "autoencoder" or
"encoder"), the epoch, the model config, a name -> {shape, dtype} table for
every tensor, and free-form ``extra`` metadata. Model weights are float32
by default; other dtypes (e.g. float64 training state) are recorded
per-tensor. Encoder-only checkpoints carry ``"encoder_only": true``.

Writes are atomic (write to a temp file in the target directory, then
rename).
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("|u1"),
    "int64": np.dtype("<i8"),
}


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return name
    raise ValidationError(f"unsupported checkpoint tensor dtype {arr.dtype}")


def save_checkpoint(
    path,
    tensors: dict[str, np.ndarray | torch.Tensor],
    *,
    kind: str,
    config: dict,
    epoch: int = 0,
    encoder_only: bool = False,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    table: dict[str, dict] = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dtype_name = _dtype_name(arr)
        arrays[name] = np.ascontiguousarray(arr.astype(_DTYPES[dtype_name], copy=False))
        table[name] = {"shape": list(arr.shape), "dtype": dtype_name}

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "encoder_only": bool(encoder_only),
        "epoch": int(epoch),
        "config": config,
        "tensors": table,
        "extra": extra or {},
    }

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp_name, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
            for name, arr in arrays.items():
                zf.writestr(f"tensors/{name}", arr.tobytes())
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a checkpoint; returns ``(tensors, manifest)``."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise ValidationError(
                    f"{path}: unsupported checkpoint format version "
                    f"{manifest.get('format_version')}"
                )
            tensors = {}
            for name, info in manifest["tensors"].items():
                raw = zf.read(f"tensors/{name}")
                dtype = _DTYPES[info.get("dtype", "float32")]
                arr = np.frombuffer(raw, dtype=dtype).reshape(info["shape"])
                tensors[name] = arr.astype(dtype.newbyteorder("="), copy=False)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ValidationError(f"corrupt checkpoint {path}: {exc}") from exc
    return tensors, manifest


def state_dict_to_tensors(state: dict[str, torch.Tensor], prefix: str = "") -> dict:
    return {prefix + name: tensor for name, tensor in state.items()}


def tensors_to_state_dict(
    tensors: dict[str, np.ndarray], prefix: str = ""
) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in tensors.items():
        if name.startswith(prefix):
            out[name[len(prefix):]] = torch.from_numpy(arr.copy())
    return out
