"""Pipeline configuration: one JSON document with dotted-path overrides.

The regime and seed live in the train section and are mirrored into the
augmentation config, so a run has exactly one source of truth for each.
Unknown keys are rejected with their full dotted path, both from the
config file and from --set expressions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ValidationError
from .inference import MERGE_STRATEGIES, TTA_VARIANTS
from .model import ModelConfig
from .postprocess import EnsembleWeights
from .training import TrainConfig


@dataclass
class InferenceConfig:
    patch_size: tuple = (128, 128, 128)
    merge_strategy: str = "later_wins"
    tta_variant: str = "none"

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValidationError(
                f"inference.patch_size must be three positive ints, got {self.patch_size}")
        if self.merge_strategy not in MERGE_STRATEGIES:
            raise ValidationError(
                f"inference.merge_strategy must be one of {MERGE_STRATEGIES}, "
                f"got {self.merge_strategy!r}")
        if self.tta_variant not in TTA_VARIANTS:
            raise ValidationError(
                f"inference.tta_variant must be one of {TTA_VARIANTS}, "
                f"got {self.tta_variant!r}")


@dataclass
class PostprocessConfig:
    cca_enabled: bool = False
    cca_min_size: int = 15
    cca_connectivity: int = 26
    cca_scope: str = "whole_foreground"
    et_threshold: int = 300

    def __post_init__(self):
        if self.cca_min_size < 0:
            raise ValidationError(
                f"postprocess.cca_min_size must be >= 0, got {self.cca_min_size}")
        if self.cca_connectivity not in (6, 26):
            raise ValidationError(
                f"postprocess.cca_connectivity must be 6 or 26, got {self.cca_connectivity}")
        if self.cca_scope not in ("whole_foreground", "per_class"):
            raise ValidationError(
                f"postprocess.cca_scope must be 'whole_foreground' or 'per_class', "
                f"got {self.cca_scope!r}")
        if self.et_threshold < 0:
            raise ValidationError(
                f"postprocess.et_threshold must be >= 0, got {self.et_threshold}")


@dataclass
class PathsConfig:
    data_dir: str = ""
    out_dir: str = ""


# augment fields owned by the train section, not settable directly
_AUGMENT_EXCLUDED = ("regime", "seed")

_MODEL_EXCLUDED = ("mlp_pe_blocks",)


def _section_defaults() -> dict:
    model = ModelConfig().to_dict()
    for key in _MODEL_EXCLUDED:
        model.pop(key, None)
    train = TrainConfig().to_dict()
    aug = AugmentConfig()
    augment = {
        "intensity_factor": aug.intensity_factor,
        "crop_size": list(aug.crop_size),
        "scale_range": list(aug.scale_range),
        "gamma_range": list(aug.gamma_range),
        "rotation_max_deg": aug.rotation_max_deg,
        "elastic_enabled": aug.elastic_enabled,
        "apply_prob": aug.apply_prob,
    }
    inference = {"patch_size": [128, 128, 128], "merge_strategy": "later_wins",
                 "tta_variant": "none"}
    post = PostprocessConfig()
    postprocess = {"cca_enabled": post.cca_enabled,
                   "cca_min_size": post.cca_min_size,
                   "cca_connectivity": post.cca_connectivity,
                   "cca_scope": post.cca_scope,
                   "et_threshold": post.et_threshold}
    return {
        "model": model,
        "train": train,
        "augment": augment,
        "inference": inference,
        "postprocess": postprocess,
        "ensemble": None,
        "paths": {"data_dir": "", "out_dir": ""},
    }


def _merge_into(dst: dict, src: dict, path: str = "") -> None:
    for key, value in src.items():
        where = f"{path}.{key}" if path else key
        if key not in dst:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(dst[key], dict) and not isinstance(value, dict) and value is not None:
            raise ValidationError(f"config key {where!r} expects a section, got {value!r}")
        if isinstance(dst[key], dict) and isinstance(value, dict):
            _merge_into(dst[key], value, where)
        else:
            dst[key] = value


def parse_set_expr(expr: str) -> tuple:
    if "=" not in expr:
        raise ValidationError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    key = key.strip()
    if not key:
        raise ValidationError(f"--set expects key=value, got {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        where = ".".join(parts[: i + 1])
        if part not in node or not isinstance(node[part], dict):
            if part == "ensemble" and node.get(part, "missing") is None:
                node[part] = {}
            else:
                raise ValidationError(f"unknown config key {where!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node and not (len(parts) > 1 and parts[0] == "ensemble"):
        raise ValidationError(f"unknown config key {key!r}")
    node[leaf] = value


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    ensemble: EnsembleWeights | None = None
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        cfg = _section_defaults()
        _merge_into(cfg, raw)
        return cls._build(cfg)

    @classmethod
    def _build(cls, cfg: dict) -> "PipelineConfig":
        def build_section(name, builder):
            try:
                return builder(cfg[name])
            except TypeError as exc:
                raise ValidationError(f"invalid config section {name!r}: {exc}")

        train = build_section("train", lambda d: TrainConfig.from_dict(d))
        augment_raw = dict(cfg["augment"])
        for key in ("crop_size", "scale_range", "gamma_range"):
            augment_raw[key] = tuple(augment_raw[key])
        augment = build_section(
            "augment",
            lambda d: AugmentConfig(regime=train.regime, seed=train.seed, **augment_raw))
        model = build_section("model", lambda d: ModelConfig.from_dict(d))
        inference = build_section("inference", lambda d: InferenceConfig(**d))
        postprocess = build_section("postprocess", lambda d: PostprocessConfig(**d))
        ensemble = None
        if cfg.get("ensemble"):
            ensemble = EnsembleWeights.from_dict(cfg["ensemble"])
        paths = build_section("paths", lambda d: PathsConfig(**d))
        return cls(model=model, train=train, augment=augment, inference=inference,
                   postprocess=postprocess, ensemble=ensemble, paths=paths)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        for key in _MODEL_EXCLUDED:
            model.pop(key, None)
        return {
            "model": model,
            "train": self.train.to_dict(),
            "augment": {
                "intensity_factor": self.augment.intensity_factor,
                "crop_size": list(self.augment.crop_size),
                "scale_range": list(self.augment.scale_range),
                "gamma_range": list(self.augment.gamma_range),
                "rotation_max_deg": self.augment.rotation_max_deg,
                "elastic_enabled": self.augment.elastic_enabled,
                "apply_prob": self.augment.apply_prob,
            },
            "inference": {
                "patch_size": list(self.inference.patch_size),
                "merge_strategy": self.inference.merge_strategy,
                "tta_variant": self.inference.tta_variant,
            },
            "postprocess": {
                "cca_enabled": self.postprocess.cca_enabled,
                "cca_min_size": self.postprocess.cca_min_size,
                "cca_connectivity": self.postprocess.cca_connectivity,
                "cca_scope": self.postprocess.cca_scope,
                "et_threshold": self.postprocess.et_threshold,
            },
            "ensemble": self.ensemble.to_dict() if self.ensemble else None,
            "paths": {"data_dir": self.paths.data_dir, "out_dir": self.paths.out_dir},
        }


def resolve_config(config_path=None, overrides=(), seed=None,
                   out_dir=None) -> PipelineConfig:
    """Defaults <- config file <- --set overrides <- --seed/--out flags."""
    cfg = _section_defaults()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
        _merge_into(cfg, raw)
    for expr in overrides:
        key, value = parse_set_expr(expr)
        _apply_override(cfg, key, value)
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
    if out_dir is not None:
        cfg["paths"]["out_dir"] = str(out_dir)
    return PipelineConfig._build(cfg)


def write_config_echo(cfg: PipelineConfig, out_dir, command: str) -> Path:
    """Record the fully resolved config beside a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict()}
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
