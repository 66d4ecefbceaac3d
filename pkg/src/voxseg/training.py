"""Self-supervised pretraining and segmentation training.

Both loops share the same skeleton: Adam, polynomial LR decay with power
0.9 over the epoch budget, one atomically written checkpoint per epoch,
and one JSON log line per epoch. Reproducibility contract: the RNG that
drives sample order and augmentation is derived from (seed, epoch), never
carried across epochs, so resuming from the epoch-k checkpoint replays
exactly the trajectory of an uninterrupted run. Optimizer moments are
stored in the checkpoint with their dtype preserved, which makes the
resume bitwise in float64 mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_sample, preprocess_for_regime, random_crop
from .checkpoint import (
    load_checkpoint,
    save_checkpoint,
    state_dict_to_tensors,
    tensors_to_state_dict,
)
from .errors import ValidationError
from .losses import (
    cross_entropy_loss,
    reconstruction_loss,
    soft_dice_loss,
    validate_loss_weights,
)
from .model import ModelConfig, build_autoencoder, build_model

POLY_POWER = 0.9

_PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    """Hyperparameters shared by pretraining and segmentation training."""

    epochs: int = 10
    batch_size: int = 1
    lr: float = 2e-4
    weight_decay: float = 1e-5
    loss_weights: tuple = (0.4, 0.6)
    mixed_precision: bool = False
    seed: int = 0
    regime: str = "transbts"
    precision: str = "float32"
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        validate_loss_weights(*self.loss_weights)
        if self.regime not in ("transbts", "nnunet"):
            raise ValidationError(f"unknown regime {self.regime!r}")
        if self.precision not in _PRECISIONS:
            raise ValidationError(f"precision must be one of {_PRECISIONS}, got {self.precision!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "loss_weights": list(self.loss_weights),
            "mixed_precision": self.mixed_precision,
            "seed": self.seed,
            "regime": self.regime,
            "precision": self.precision,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if k == "loss_weights" else v) for k, v in d.items()})


def poly_lr(base_lr: float, epoch: int, total_epochs: int, power: float = POLY_POWER) -> float:
    """Polynomial decay; epoch is 0-based, epoch 0 trains at base_lr."""
    frac = 1.0 - epoch / float(total_epochs)
    return base_lr * max(frac, 0.0) ** power


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _seed_torch(seed: int, epoch: int) -> None:
    torch.manual_seed((seed * 1_000_003 + epoch) % (2**63 - 1))


def _torch_dtype(precision: str):
    return torch.float64 if precision == "float64" else torch.float32


class DynamicLossScaler:
    """Small dynamic loss scaler for the optional half-precision mode.

    Scales the loss before backward, skips the optimizer step and halves
    the scale when any gradient is non-finite, and doubles the scale after
    a run of clean steps.
    """

    def __init__(self, init_scale=2.0**12, growth_interval=100, max_scale=2.0**24):
        self.scale = float(init_scale)
        self.growth_interval = growth_interval
        self.max_scale = max_scale
        self._good_steps = 0

    def step(self, optimizer, loss) -> bool:
        (loss * self.scale).backward()
        grads_finite = all(
            torch.isfinite(p.grad).all()
            for group in optimizer.param_groups
            for p in group["params"]
            if p.grad is not None
        )
        if not grads_finite:
            optimizer.zero_grad(set_to_none=True)
            self.scale = max(self.scale / 2.0, 1.0)
            self._good_steps = 0
            return False
        for group in optimizer.param_groups:
            for p in group["params"]:
                if p.grad is not None:
                    p.grad.div_(self.scale)
        optimizer.step()
        self._good_steps += 1
        if self._good_steps >= self.growth_interval:
            self.scale = min(self.scale * 2.0, self.max_scale)
            self._good_steps = 0
        return True


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    tensors = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arr = value.detach().cpu().numpy()
            else:
                arr = np.asarray(value, dtype=np.float64)
            tensors[f"opt.{idx}.{key}"] = arr
    return tensors


def _restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict) -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        t = torch.from_numpy(np.array(arr))
        if key == "step":
            t = t.reshape(()).to(torch.float32)
        entry[key] = t
    sd["state"] = state
    optimizer.load_state_dict(sd)


def _pad_to_multiple(x: torch.Tensor, factor: int):
    """Pad (N,C,D,H,W) with zeros so spatial dims divide factor; returns
    the padded tensor and the slices recovering the original region."""
    pads = []
    slices = [slice(None), slice(None)]
    for dim in x.shape[2:]:
        rem = (-dim) % factor
        pads.append((rem // 2, rem - rem // 2))
        slices.append(slice(rem // 2, rem // 2 + dim))
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return x, tuple(slices)
    flat = []
    for lo, hi in reversed(pads):
        flat.extend([lo, hi])
    return torch.nn.functional.pad(x, flat), tuple(slices)


def _sample_tensors(vol, labels, dtype):
    x = torch.from_numpy(vol.data).to(dtype)
    y = torch.from_numpy(labels.data) if labels is not None else None
    return x, y


def _write_log_line(path: Path, record: dict, append: bool) -> None:
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        fh.write(json.dumps(record) + "\n")


def _check_resume_compat(manifest: dict, kind: str, train_cfg: TrainConfig,
                         model_cfg: ModelConfig) -> None:
    if manifest.get("kind") != kind:
        raise ValidationError(
            f"checkpoint mismatch: expected kind {kind!r}, got {manifest.get('kind')!r}")
    stored = manifest.get("config", {})
    if stored.get("model") != model_cfg.to_dict():
        raise ValidationError("checkpoint mismatch: model config differs")
    stored_train = dict(stored.get("train", {}))
    current = train_cfg.to_dict()
    for key in ("epochs", "lr", "weight_decay", "loss_weights", "seed",
                "regime", "precision", "batch_size"):
        if stored_train.get(key) != current[key]:
            raise ValidationError(
                f"checkpoint mismatch: train config field {key!r} differs "
                f"({stored_train.get(key)!r} vs {current[key]!r})")


def load_encoder_weights(model, ckpt_path) -> None:
    """Initialize model.encoder from an encoder-only checkpoint in place."""
    tensors, manifest = load_checkpoint(ckpt_path)
    if not manifest.get("encoder_only"):
        raise ValidationError("checkpoint mismatch: not an encoder-only checkpoint")
    incoming = tensors_to_state_dict(tensors, prefix="encoder.")
    current = model.encoder.state_dict()
    if set(incoming) != set(current):
        missing = sorted(set(current) - set(incoming))
        extra = sorted(set(incoming) - set(current))
        first = (missing or extra)[0]
        raise ValidationError(f"checkpoint mismatch: encoder tensor set differs at {first!r}")
    for name, tensor in incoming.items():
        if tuple(tensor.shape) != tuple(current[name].shape):
            raise ValidationError(
                f"checkpoint mismatch: shape mismatch for {name!r}: "
                f"{tuple(tensor.shape)} vs {tuple(current[name].shape)}")
    model.encoder.load_state_dict(incoming)


def pretrain(cfg: TrainConfig, model_cfg: ModelConfig, dataset, out_dir,
             augment_cfg: AugmentConfig | None = None) -> Path:
    """Train the reconstruction autoencoder and emit an encoder checkpoint.

    dataset is a sequence of MultiModalVolume (or (volume, labels) pairs
    whose labels are ignored). Returns the path of the encoder-only
    checkpoint. Also writes the full autoencoder checkpoint and a JSONL
    loss curve next to it.
    """
    volumes = [item[0] if isinstance(item, tuple) else item for item in dataset]
    if not volumes:
        raise ValidationError("empty pretraining dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aug = augment_cfg or AugmentConfig(regime=cfg.regime, seed=cfg.seed)
    dtype = _torch_dtype(cfg.precision)

    prepared = [preprocess_for_regime(v, None, cfg.regime)[0] for v in volumes]

    model = build_autoencoder(model_cfg, seed=cfg.seed)
    if dtype == torch.float64:
        model = model.double()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    scaler = DynamicLossScaler() if cfg.mixed_precision else None

    log_path = out_dir / "pretrain_log.jsonl"
    global_step = 0
    for epoch in range(cfg.epochs):
        if cfg.max_steps is not None and global_step >= cfg.max_steps:
            break
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        _seed_torch(cfg.seed, epoch)
        lr = poly_lr(cfg.lr, epoch, cfg.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()

        losses = []
        for i in rng.permutation(len(prepared)):
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                break
            crop, _ = random_crop(prepared[i], None, aug.crop_size, rng)
            x, _ = _sample_tensors(crop, None, dtype)
            x = x.unsqueeze(0)
            optimizer.zero_grad(set_to_none=True)
            if scaler is not None:
                with torch.autocast(device_type="cpu", dtype=torch.bfloat16):
                    loss = reconstruction_loss(model(x), x)
                scaler.step(optimizer, loss.float())
            else:
                loss = reconstruction_loss(model(x), x)
                loss.backward()
                optimizer.step()
            losses.append(float(loss.detach()))
            global_step += 1

        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "dice_loss": None,
            "ce_loss": None,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        _write_log_line(log_path, record, append=epoch > 0)

    config = {"train": cfg.to_dict(), "model": model_cfg.to_dict()}
    save_checkpoint(out_dir / "autoencoder.ckpt",
                    state_dict_to_tensors(model.state_dict()),
                    kind="autoencoder", config=config, epoch=cfg.epochs)
    encoder_path = out_dir / "encoder.ckpt"
    save_checkpoint(encoder_path,
                    state_dict_to_tensors(model.encoder.state_dict(), prefix="encoder."),
                    kind="encoder", config=config, epoch=cfg.epochs,
                    encoder_only=True)
    return encoder_path


def train(cfg: TrainConfig, model_cfg: ModelConfig, dataset, out_dir,
          augment_cfg: AugmentConfig | None = None,
          init_encoder=None, resume_from=None) -> Path:
    """Segmentation training loop. Returns the final checkpoint path.

    dataset is a sequence of (MultiModalVolume, LabelVolume) pairs. One
    checkpoint per epoch lands in out_dir plus final.ckpt; the loss curve
    goes to train_log.jsonl. init_encoder warm-starts the encoder from a
    pretraining checkpoint; resume_from continues a previous run and is
    mutually exclusive with init_encoder.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValidationError("empty training dataset")
    if init_encoder is not None and resume_from is not None:
        raise ValidationError("init_encoder and resume_from are mutually exclusive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aug = augment_cfg or AugmentConfig(regime=cfg.regime, seed=cfg.seed)
    if aug.regime != cfg.regime:
        raise ValidationError(
            f"augment regime {aug.regime!r} does not match training regime {cfg.regime!r}")
    dtype = _torch_dtype(cfg.precision)
    w_dice, w_ce = cfg.loss_weights

    prepared = []
    for vol, labels in pairs:
        p_vol, p_lab, _ = preprocess_for_regime(vol, labels, cfg.regime)
        prepared.append((p_vol, p_lab))

    model = build_model(model_cfg, seed=cfg.seed)
    if dtype == torch.float64:
        model = model.double()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    scaler = DynamicLossScaler() if cfg.mixed_precision else None
    config = {"train": cfg.to_dict(), "model": model_cfg.to_dict()}

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        tensors, manifest = load_checkpoint(resume_from)
        _check_resume_compat(manifest, "segmentation", cfg, model_cfg)
        model.load_state_dict(tensors_to_state_dict(tensors, prefix="model."))
        _restore_optimizer(optimizer, tensors)
        start_epoch = int(manifest["epoch"])
        global_step = int(manifest.get("extra", {}).get("global_step", 0))
    elif init_encoder is not None:
        load_encoder_weights(model, init_encoder)
        if dtype == torch.float64:
            model = model.double()

    def write_ckpt(path, completed_epochs):
        tensors = state_dict_to_tensors(model.state_dict(), prefix="model.")
        tensors.update(_optimizer_tensors(optimizer))
        save_checkpoint(path, tensors, kind="segmentation", config=config,
                        epoch=completed_epochs,
                        extra={"global_step": global_step})

    log_path = out_dir / "train_log.jsonl"
    last_epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and global_step >= cfg.max_steps:
            break
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        _seed_torch(cfg.seed, epoch)
        lr = poly_lr(cfg.lr, epoch, cfg.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()

        order = list(rng.permutation(len(prepared)))
        batches = [order[i:i + cfg.batch_size]
                   for i in range(0, len(order), cfg.batch_size)]
        losses, dice_losses, ce_losses = [], [], []
        for batch in batches:
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                break
            xs, ys = [], []
            for i in batch:
                vol, lab = augment_sample(prepared[i][0], prepared[i][1], aug, rng)
                x, y = _sample_tensors(vol, lab, dtype)
                xs.append(x)
                ys.append(y)
            x = torch.stack(xs)
            y = torch.stack(ys)
            optimizer.zero_grad(set_to_none=True)
            if scaler is not None:
                with torch.autocast(device_type="cpu", dtype=torch.bfloat16):
                    logits = model(x)
                logits = logits.float()
                d = soft_dice_loss(torch.softmax(logits, dim=1), y)
                c = cross_entropy_loss(logits, y)
                loss = w_dice * d + w_ce * c
                scaler.step(optimizer, loss)
            else:
                logits = model(x)
                d = soft_dice_loss(torch.softmax(logits, dim=1), y)
                c = cross_entropy_loss(logits, y)
                loss = w_dice * d + w_ce * c
                loss.backward()
                optimizer.step()
            losses.append(float(loss.detach()))
            dice_losses.append(float(d.detach()))
            ce_losses.append(float(c.detach()))
            global_step += 1

        write_ckpt(out_dir / f"epoch_{epoch + 1:04d}.ckpt", epoch + 1)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "dice_loss": float(np.mean(dice_losses)) if dice_losses else None,
            "ce_loss": float(np.mean(ce_losses)) if ce_losses else None,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        _write_log_line(log_path, record, append=epoch > start_epoch or start_epoch > 0)
        last_epoch = epoch

    final = out_dir / "final.ckpt"
    write_ckpt(final, last_epoch + 1)
    return final


def load_model_from_checkpoint(ckpt_path, precision: str = "float32"):
    """Rebuild a segmentation model (or autoencoder) from a checkpoint."""
    tensors, manifest = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig.from_dict(manifest["config"]["model"])
    kind = manifest.get("kind")
    if kind == "segmentation":
        model = build_model(model_cfg)
        prefix = "model."
    elif kind == "autoencoder":
        model = build_autoencoder(model_cfg)
        prefix = ""
    else:
        raise ValidationError(f"cannot rebuild a model from a {kind!r} checkpoint")
    if precision == "float64":
        model = model.double()
    state = tensors_to_state_dict(tensors, prefix=prefix)
    state = {k: v for k, v in state.items() if not k.startswith("opt.")}
    model.load_state_dict(state)
    model.eval()
    return model, model_cfg, manifest


def evaluate_training_dice(model, dataset, regime: str = "transbts",
                           precision: str = "float32") -> float:
    """Mean (1 - soft dice loss) over full preprocessed volumes.

    Volumes are zero-padded to the model's downsampling multiple and the
    logits cropped back before scoring.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValidationError("empty evaluation dataset")
    dtype = _torch_dtype(precision)
    factor = model.cfg.downsample_factor
    model.eval()
    scores = []
    with torch.no_grad():
        for vol, labels in pairs:
            p_vol, p_lab, _ = preprocess_for_regime(vol, labels, regime)
            x, y = _sample_tensors(p_vol, p_lab, dtype)
            x = x.unsqueeze(0)
            y = y.unsqueeze(0)
            padded, slices = _pad_to_multiple(x, factor)
            logits = model(padded)[slices]
            d = soft_dice_loss(torch.softmax(logits, dim=1), y)
            scores.append(1.0 - float(d))
    return float(np.mean(scores))
