"""Deterministic synthetic phantoms: nested-ellipsoid tumors with known labels.

Every downstream stage (training, inference, metrics) is exercised on these
instead of real scans. A phantom is a "brain" ellipsoid on a zero background
containing three nested tumor ellipsoids so that ET ⊆ TC ⊆ WT always holds
and all three labels are present. Channel intensities follow a fixed
modality-contrast table (FLAIR bright on edema, T1ce bright on enhancing
tumor, ...) plus per-case jitter and Gaussian noise.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .volumes import LabelVolume, MultiModalVolume, Spacing

MIN_DIM = 32

# Base intensity per (channel, tissue); channels are (FLAIR, T1, T1ce, T2),
# tissues are (normal brain, NCR, ED, ET). Values chosen for distinct,
# learnable contrasts, not radiological realism.
_TISSUE_INTENSITY = np.array(
    [
        # brain  NCR   ED    ET
        [0.30, 0.45, 0.80, 0.55],  # FLAIR
        [0.40, 0.20, 0.35, 0.50],  # T1
        [0.35, 0.25, 0.30, 0.90],  # T1ce
        [0.30, 0.60, 0.70, 0.45],  # T2
    ],
    dtype=np.float64,
)


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(
    seed: int,
    shape=(64, 64, 64),
    noise_sigma: float = 0.05,
    spacing: Spacing = (1.0, 1.0, 1.0),
) -> tuple[MultiModalVolume, LabelVolume]:
    """Generate one synthetic (image, label) pair, deterministic in ``seed``.

    ``noise_sigma`` is the Gaussian noise level as a fraction of the
    intensity table's dynamic range. Each spatial dim must be >= 32 so the
    nested ellipsoids fit with all labels present.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < MIN_DIM for s in shape):
        raise ValidationError(
            f"phantom shape must have 3 dims each >= {MIN_DIM}, got {shape}"
        )

    rng = np.random.default_rng(seed)
    dims = np.array(shape, dtype=np.float64)

    center = dims / 2.0 + rng.uniform(-0.04, 0.04, size=3) * dims
    brain_r = rng.uniform(0.40, 0.46, size=3) * dims
    wt_r = rng.uniform(0.22, 0.30, size=3) * dims
    tc_r = wt_r * rng.uniform(0.55, 0.70, size=3)
    et_r = tc_r * rng.uniform(0.48, 0.65, size=3)

    brain = _ellipsoid_mask(shape, center, brain_r)
    wt = _ellipsoid_mask(shape, center, wt_r)
    tc = _ellipsoid_mask(shape, center, tc_r)
    et = _ellipsoid_mask(shape, center, et_r)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[wt & ~tc] = 2
    labels[tc & ~et] = 1
    labels[et] = 4

    # Tissue index per voxel: 0 brain, 1 NCR, 2 ED, 3 ET; background handled
    # by the brain mask below.
    tissue = np.zeros(shape, dtype=np.intp)
    tissue[labels == 1] = 1
    tissue[labels == 2] = 2
    tissue[labels == 4] = 3

    table = _TISSUE_INTENSITY + rng.uniform(-0.03, 0.03, size=_TISSUE_INTENSITY.shape)
    dynamic_range = float(table.max() - table.min())
    sigma = noise_sigma * dynamic_range

    image = np.empty((4,) + shape, dtype=np.float32)
    for c in range(4):
        chan = table[c][tissue]
        if sigma > 0:
            chan = chan + rng.normal(0.0, sigma, size=shape)
        chan[~brain] = 0.0
        image[c] = chan.astype(np.float32)

    case_id = f"phantom_{seed:05d}"
    vol = MultiModalVolume(data=image, spacing=spacing, case_id=case_id)
    lab = LabelVolume(data=labels, spacing=spacing, case_id=case_id)
    return vol, lab
