"""Segmentation and reconstruction losses.

The segmentation objective is a weighted sum of a soft multi-class dice
loss and voxelwise cross-entropy. Dice is computed on the three
foreground tumor classes only; the background channel never enters the
average. Label volumes carry raw values {0, 1, 2, 4} and are mapped to
channel indices {0, 1, 2, 3} at the loss boundary.
"""

import torch
import torch.nn.functional as F

from .errors import ValidationError

DICE_EPS = 1e-5

# raw label value -> channel index; -1 marks an illegal value
_LABEL_LUT = torch.tensor([0, 1, 2, -1, 3], dtype=torch.long)


def labels_to_channel_indices(labels: torch.Tensor) -> torch.Tensor:
    """Map raw label values {0,1,2,4} to channel indices {0,1,2,3}."""
    if labels.dtype not in (torch.uint8, torch.int16, torch.int32, torch.int64):
        raise ValidationError(f"labels must be integer typed, got {labels.dtype}")
    flat = labels.long()
    bad = (flat < 0) | (flat > 4) | (flat == 3)
    if bad.any():
        offender = int(flat[bad].flatten()[0])
        raise ValidationError(f"illegal label {offender}")
    return _LABEL_LUT.to(flat.device)[flat]


def one_hot_target(labels: torch.Tensor, num_classes: int = 4) -> torch.Tensor:
    """Raw labels (N,D,H,W) -> one-hot float tensor (N,C,D,H,W)."""
    idx = labels_to_channel_indices(labels)
    return F.one_hot(idx, num_classes).permute(0, 4, 1, 2, 3).float()


def soft_dice_loss(probs: torch.Tensor, labels: torch.Tensor,
                   eps: float = DICE_EPS) -> torch.Tensor:
    """1 minus mean soft dice over the foreground classes.

    probs is a softmax-normalized (N,4,D,H,W) tensor; labels is the raw
    integer batch (N,D,H,W). Sums run over batch and space jointly, so
    the score is the dataset-style global dice per class.
    """
    if probs.ndim != 5 or probs.shape[1] != 4:
        raise ValidationError(f"expected probs of shape (N,4,D,H,W), got {tuple(probs.shape)}")
    if labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValidationError(
            f"labels shape {tuple(labels.shape)} does not match probs {tuple(probs.shape)}")
    target = one_hot_target(labels).to(probs.dtype)
    dims = (0, 2, 3, 4)
    intersection = (probs * target).sum(dim=dims)
    denom = probs.sum(dim=dims) + target.sum(dim=dims)
    dice = (2.0 * intersection + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean voxelwise negative log-probability of the true class."""
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValidationError(
            f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    idx = labels_to_channel_indices(labels)
    return F.cross_entropy(logits, idx)


def combined_loss(logits: torch.Tensor, labels: torch.Tensor,
                  w_dice: float, w_ce: float) -> torch.Tensor:
    """w_dice * dice(softmax(logits)) + w_ce * cross-entropy(logits)."""
    validate_loss_weights(w_dice, w_ce)
    probs = torch.softmax(logits, dim=1)
    return w_dice * soft_dice_loss(probs, labels) + w_ce * cross_entropy_loss(logits, labels)


def validate_loss_weights(w_dice: float, w_ce: float) -> None:
    if w_dice < 0 or w_ce < 0:
        raise ValidationError(f"loss weights must be nonnegative, got ({w_dice}, {w_ce})")
    if abs(w_dice + w_ce - 1.0) > 1e-9:
        raise ValidationError(f"loss weights must sum to 1, got ({w_dice}, {w_ce})")


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all voxels and channels."""
    if recon.shape != target.shape:
        raise ValidationError(
            f"reconstruction shape {tuple(recon.shape)} does not match target {tuple(target.shape)}")
    return (recon - target).abs().mean()
