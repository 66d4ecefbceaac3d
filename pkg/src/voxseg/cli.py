"""Command-line pipeline driver.

Seven subcommands cover the full workflow: phantom (synthetic data),
pretrain, train, predict, postprocess, ensemble, evaluate. Every command
resolves one JSON config (defaults <- --config file <- --set overrides <-
--seed/--out) and echoes the resolved document beside its outputs, so a
run directory is self-describing.

Exit codes: 0 success, 2 validation error (bad config, missing inputs),
1 unexpected runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, resolve_config, write_config_echo
from .errors import ValidationError
from .inference import TorchPredictor, predict_case
from .metrics import evaluate_set
from .phantom import generate_phantom
from .postprocess import (EnsembleWeights, apply_postprocessing, argmax_labels,
                          ensemble_average)
from .training import load_model_from_checkpoint, pretrain, train
from .volumes import (LabelVolume, load_probability_volume, load_volume,
                      save_label_volume, save_probability_volume, save_volume)

IMAGE_SUFFIX = "_image.v3d"
LABELS_SUFFIX = "_labels.v3d"
PROBS_SUFFIX = "_probs.v3d"
PRED_SUFFIX = "_pred.v3d"
POST_SUFFIX = "_post.v3d"


def _num_workers() -> int:
    raw = os.environ.get("VOXSEG_NUM_WORKERS", "").strip()
    if not raw:
        return 4
    try:
        workers = int(raw)
    except ValueError:
        raise ValidationError(f"VOXSEG_NUM_WORKERS must be an integer, got {raw!r}")
    if workers < 1:
        raise ValidationError(f"VOXSEG_NUM_WORKERS must be >= 1, got {workers}")
    return workers


def _require_dir(path_str: str, what: str) -> Path:
    if not path_str:
        raise ValidationError(f"{what} is not set")
    path = Path(path_str)
    if not path.is_dir():
        raise ValidationError(f"{what} does not exist: {path}")
    return path


def _out_dir(cfg: PipelineConfig) -> Path:
    if not cfg.paths.out_dir:
        raise ValidationError("paths.out_dir is not set (use --out)")
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def read_manifest(data_dir: Path, suffix: str) -> list[str]:
    """Case ids from manifest.json, or a suffix glob when no manifest."""
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        try:
            doc = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest is not valid JSON: {manifest}: {exc}")
        cases = doc.get("cases")
        if not isinstance(cases, list) or not all(isinstance(c, str) for c in cases):
            raise ValidationError(f"manifest must hold a list of case ids: {manifest}")
        return cases
    cases = sorted(p.name[: -len(suffix)] for p in data_dir.glob(f"*{suffix}"))
    if not cases:
        raise ValidationError(f"no cases found under {data_dir} (no manifest.json, "
                              f"no *{suffix} files)")
    return cases


def write_manifest(out_dir: Path, cases: list[str]) -> None:
    (out_dir / "manifest.json").write_text(
        json.dumps({"cases": list(cases)}, indent=2) + "\n")


def _load_many(paths: list[Path], loader):
    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        return list(pool.map(loader, paths))


def load_image_label_pairs(data_dir: Path, with_labels: bool = True) -> list:
    cases = read_manifest(data_dir, IMAGE_SUFFIX)
    image_jobs = []
    label_jobs = []
    for case in cases:
        img = data_dir / f"{case}{IMAGE_SUFFIX}"
        if not img.exists():
            raise ValidationError(f"missing image volume: {img}")
        image_jobs.append((img, case))
        if with_labels:
            lab = data_dir / f"{case}{LABELS_SUFFIX}"
            if not lab.exists():
                raise ValidationError(f"missing label volume: {lab}")
            label_jobs.append((lab, case))
    images = _load_many(image_jobs, lambda job: load_volume(job[0], "image", job[1]))
    if not with_labels:
        return images
    labels = _load_many(label_jobs, lambda job: load_volume(job[0], "label", job[1]))
    return list(zip(images, labels))


def cmd_phantom(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    if args.count < 1:
        raise ValidationError(f"--count must be >= 1, got {args.count}")
    cases = []
    for i in range(args.count):
        vol, labels = generate_phantom(cfg.train.seed + i, shape=tuple(args.shape))
        save_volume(vol, out / f"{vol.case_id}{IMAGE_SUFFIX}")
        save_label_volume(labels, out / f"{vol.case_id}{LABELS_SUFFIX}")
        cases.append(vol.case_id)
    write_manifest(out, cases)
    write_config_echo(cfg, out, "phantom")
    print(f"wrote {len(cases)} phantom cases to {out}")
    return 0


def cmd_pretrain(cfg: PipelineConfig, args) -> int:
    data_dir = _require_dir(cfg.paths.data_dir, "paths.data_dir")
    out = _out_dir(cfg)
    volumes = load_image_label_pairs(data_dir, with_labels=False)
    encoder_path = pretrain(cfg.train, cfg.model, volumes, out,
                            augment_cfg=cfg.augment)
    write_config_echo(cfg, out, "pretrain")
    print(f"encoder checkpoint: {encoder_path}")
    return 0


def cmd_train(cfg: PipelineConfig, args) -> int:
    data_dir = _require_dir(cfg.paths.data_dir, "paths.data_dir")
    out = _out_dir(cfg)
    for flag, value in (("--init-encoder", args.init_encoder),
                        ("--resume", args.resume)):
        if value is not None and not Path(value).exists():
            raise ValidationError(f"{flag} checkpoint not found: {value}")
    pairs = load_image_label_pairs(data_dir)
    final_path = train(cfg.train, cfg.model, pairs, out,
                       augment_cfg=cfg.augment,
                       init_encoder=args.init_encoder,
                       resume_from=args.resume)
    write_config_echo(cfg, out, "train")
    print(f"final checkpoint: {final_path}")
    return 0


def cmd_predict(cfg: PipelineConfig, args) -> int:
    data_dir = _require_dir(cfg.paths.data_dir, "paths.data_dir")
    out = _out_dir(cfg)
    model_path = Path(args.model)
    if not model_path.exists():
        raise ValidationError(f"--model checkpoint not found: {model_path}")
    model, _, _ = load_model_from_checkpoint(model_path)
    predictor = TorchPredictor(model)
    volumes = load_image_label_pairs(data_dir, with_labels=False)
    cases = []
    for vol in volumes:
        probs = predict_case(predictor, vol, regime=cfg.train.regime,
                             patch_size=cfg.inference.patch_size,
                             tta=cfg.inference.tta_variant,
                             merge_strategy=cfg.inference.merge_strategy)
        pred = argmax_labels(probs)
        save_probability_volume(probs, out / f"{vol.case_id}{PROBS_SUFFIX}")
        save_label_volume(pred, out / f"{vol.case_id}{PRED_SUFFIX}")
        cases.append(vol.case_id)
    write_manifest(out, cases)
    write_config_echo(cfg, out, "predict")
    print(f"predicted {len(cases)} cases into {out}")
    return 0


def cmd_postprocess(cfg: PipelineConfig, args) -> int:
    pred_dir = _require_dir(args.pred_dir or cfg.paths.data_dir,
                            "--pred-dir (or paths.data_dir)")
    out = _out_dir(cfg)
    cases = read_manifest(pred_dir, PRED_SUFFIX)
    post = cfg.postprocess
    for case in cases:
        path = pred_dir / f"{case}{PRED_SUFFIX}"
        if not path.exists():
            raise ValidationError(f"missing prediction: {path}")
        pred = load_volume(path, "label", case)
        cleaned = apply_postprocessing(
            pred, cca_enabled=post.cca_enabled, cca_min_size=post.cca_min_size,
            cca_connectivity=post.cca_connectivity, cca_scope=post.cca_scope,
            et_threshold=post.et_threshold)
        save_label_volume(cleaned, out / f"{case}{POST_SUFFIX}")
    write_manifest(out, cases)
    write_config_echo(cfg, out, "postprocess")
    print(f"postprocessed {len(cases)} cases into {out}")
    return 0


def cmd_ensemble(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ValidationError(f"--spec file not found: {spec_path}")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"ensemble spec is not valid JSON: {exc}")
    members = spec.get("members")
    if not isinstance(members, list) or len(members) < 2:
        raise ValidationError("ensemble spec needs a 'members' list of >= 2 "
                              "prediction directories")
    member_dirs = [_require_dir(m, f"ensemble member {i}")
                   for i, m in enumerate(members)]
    case_lists = [read_manifest(d, PROBS_SUFFIX) for d in member_dirs]
    cases = case_lists[0]
    for i, other in enumerate(case_lists[1:], start=1):
        if sorted(other) != sorted(cases):
            raise ValidationError(
                f"ensemble member {i} case set differs from member 0")

    if spec.get("weights") is not None:
        weights = EnsembleWeights.from_dict(spec["weights"])
    elif cfg.ensemble is not None:
        weights = cfg.ensemble
    else:
        weights = EnsembleWeights.uniform(len(member_dirs))
    if weights.num_members != len(member_dirs):
        raise ValidationError(
            f"{len(member_dirs)} members but weights for {weights.num_members}")

    for case in cases:
        probs = [load_probability_volume(d / f"{case}{PROBS_SUFFIX}", case)
                 for d in member_dirs]
        fused = ensemble_average(probs, weights)
        save_probability_volume(fused, out / f"{case}{PROBS_SUFFIX}")
        save_label_volume(argmax_labels(fused), out / f"{case}{PRED_SUFFIX}")
    write_manifest(out, cases)
    write_config_echo(cfg, out, "ensemble")
    print(f"ensembled {len(member_dirs)} members over {len(cases)} cases into {out}")
    return 0


def _save_overlay(path: Path, image: np.ndarray, gt: np.ndarray,
                  pred: np.ndarray) -> None:
    """Mid-axial slice, ground truth beside prediction over the first channel."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    mid = image.shape[1] // 2
    base = image[0, mid]
    cmap = ListedColormap([(0, 0, 0, 0), (1, 0, 0, 0.6), (0, 1, 0, 0.6),
                           (0, 0, 0, 0), (1, 1, 0, 0.6)])
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, overlay, title in ((axes[0], gt[mid], "ground truth"),
                               (axes[1], pred[mid], "prediction")):
        ax.imshow(base, cmap="gray")
        ax.imshow(overlay, cmap=cmap, vmin=0, vmax=4, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    pred_dir = _require_dir(args.pred_dir, "--pred-dir")
    gt_dir = _require_dir(args.gt_dir or cfg.paths.data_dir,
                          "--gt-dir (or paths.data_dir)")
    out = _out_dir(cfg)
    pred_suffix = f"{args.pred_suffix}.v3d"
    cases = read_manifest(pred_dir, pred_suffix)
    pairs = []
    for case in cases:
        pred_path = pred_dir / f"{case}{pred_suffix}"
        gt_path = gt_dir / f"{case}{LABELS_SUFFIX}"
        for path in (pred_path, gt_path):
            if not path.exists():
                raise ValidationError(f"missing volume: {path}")
        pairs.append((load_volume(pred_path, "label", case),
                      load_volume(gt_path, "label", case)))
    report = evaluate_set(pairs, mode=args.mode)
    (out / "report.json").write_text(report.to_json() + "\n")
    table = report.format_table()
    (out / "report.txt").write_text(table + "\n")
    if args.overlay:
        for case, (pred, gt) in zip(cases, pairs):
            image = load_volume(gt_dir / f"{case}{IMAGE_SUFFIX}", "image")
            _save_overlay(out / f"{case}_overlay.png", image.data,
                          gt.data, pred.data)
    write_config_echo(cfg, out, "evaluate")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file merged over defaults")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="dotted-path config override, repeatable")
    common.add_argument("--seed", type=int, help="sets train.seed")
    common.add_argument("--out", metavar="DIR", help="sets paths.out_dir")

    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="multimodal 3D brain tumor segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common],
                       help="generate synthetic (image, label) cases")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64],
                   metavar=("D", "H", "W"))
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain", parents=[common],
                       help="self-supervised autoencoder pretraining")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="segmentation training")
    p.add_argument("--init-encoder", metavar="CKPT",
                   help="warm-start the encoder from a pretraining checkpoint")
    p.add_argument("--resume", metavar="CKPT",
                   help="resume from a mid-run checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="tiled whole-volume inference")
    p.add_argument("--model", metavar="CKPT", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", parents=[common],
                       help="connected-component cleanup and ET relabeling")
    p.add_argument("--pred-dir", metavar="DIR",
                   help="directory of *_pred.v3d (default: paths.data_dir)")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ensemble", parents=[common],
                       help="weighted fusion of member probability maps")
    p.add_argument("--spec", metavar="JSON", required=True,
                   help='{"members": [dir, ...], "weights": {...}?}')
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common],
                       help="region metrics report for predictions")
    p.add_argument("--pred-dir", metavar="DIR", required=True)
    p.add_argument("--gt-dir", metavar="DIR",
                   help="directory of *_labels.v3d (default: paths.data_dir)")
    p.add_argument("--pred-suffix", default="_pred",
                   help="prediction filename suffix before .v3d")
    p.add_argument("--mode", choices=("regions", "labels"), default="regions")
    p.add_argument("--overlay", action="store_true",
                   help="export mid-axial PNG overlays per case")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(config_path=args.config, overrides=args.overrides,
                             seed=args.seed, out_dir=args.out)
        return args.func(cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
