"""Acceptance suite: the properties the pipeline must demonstrate end to end.

Each criterion is one test; tests/conftest.py prints one
"[ACCEPTANCE n] PASS/FAIL" line per criterion in the terminal summary.
Everything runs on synthetic phantoms at desk scale with seeded
determinism; published reference constants are pinned exactly.
"""

import itertools
import json

import numpy as np
import torch

from voxseg.augment import AugmentConfig
from voxseg.cli import main
from voxseg.checkpoint import load_checkpoint
from voxseg.inference import (TorchPredictor, merge_patches, plan_patch_grid,
                              predict_volume, tta_members, tta_predict)
from voxseg.losses import combined_loss
from voxseg.metrics import HD95_PENALTY, binary_surface, dice, hd95
from voxseg.model import (MlpPositionalEncoding, ModelConfig, build_model,
                          count_parameters)
from voxseg.phantom import generate_phantom
from voxseg.postprocess import (EnsembleWeights, argmax_labels,
                                connected_components, ensemble_average,
                                et_replacement, remove_small_components)
from voxseg.training import (TrainConfig, evaluate_training_dice,
                             load_encoder_weights, load_model_from_checkpoint,
                             pretrain, train)
from voxseg.volumes import (LabelVolume, MultiModalVolume, ProbabilityVolume,
                            region_decompose)

TWO_MODEL = {"ncr": (0.5, 0.5), "ed": (0.7, 0.3), "et": (0.6, 0.4)}
THREE_MODEL = {"ncr": (0.359, 0.347, 0.294), "ed": (0.253, 0.387, 0.36),
               "et": (0.295, 0.353, 0.351)}


def _label_volume(data):
    return LabelVolume(data=np.asarray(data, dtype=np.uint8),
                       spacing=(1.0, 1.0, 1.0), case_id="t")


def _random_probs(rng, shape):
    raw = rng.random((4,) + shape).astype(np.float32) + 0.05
    data = raw / raw.sum(axis=0, keepdims=True)
    return ProbabilityVolume(data=data.astype(np.float32),
                             spacing=(1.0, 1.0, 1.0), case_id="t")


def test_acceptance_01_variable_input_size():
    """One built model runs on 64/96/128 cubes without rebuild."""
    cfg = ModelConfig(base_channels=4, encoder_stages=4, embed_dim=16,
                      tf_layers=1, tf_heads=2, dropout=0.0)
    model = build_model(cfg, seed=0).eval()
    torch.manual_seed(0)
    for size in (64, 96, 128):
        with torch.no_grad():
            out = model(torch.randn(1, 4, size, size, size))
        assert out.shape == (1, 4, size, size, size)
        assert torch.isfinite(out).all()


def test_acceptance_02_gradient_correctness():
    """Analytic gradients of the combined loss match central differences."""
    cfg = ModelConfig(base_channels=4, encoder_stages=3, embed_dim=16,
                      tf_layers=1, tf_heads=2, dropout=0.0)
    model = build_model(cfg, seed=0).double()
    assert count_parameters(model) <= 50_000
    model.train()

    rng = np.random.default_rng(7)
    x = torch.tensor(rng.standard_normal((1, 4, 8, 8, 8)))
    labels = torch.tensor(
        rng.choice(np.array([0, 1, 2, 4]), size=(1, 8, 8, 8)).astype(np.int64))

    def loss_value():
        return combined_loss(model(x), labels, 0.4, 0.6)

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.grad is not None]

    checked = 0
    for attempt in range(120):
        if checked == 20:
            break
        p = params[int(rng.integers(len(params)))]
        flat = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[flat])
        theta = float(p.data.view(-1)[flat])
        eps = 1e-5 * max(1.0, abs(theta))
        with torch.no_grad():
            p.data.view(-1)[flat] = theta + eps
            up = float(loss_value())
            p.data.view(-1)[flat] = theta - eps
            down = float(loss_value())
            p.data.view(-1)[flat] = theta
        fd = (up - down) / (2.0 * eps)
        scale = max(abs(analytic), abs(fd))
        if scale < 1e-7:
            continue
        assert abs(analytic - fd) / scale < 1e-3, \
            f"param sample {attempt}: analytic {analytic} vs fd {fd}"
        checked += 1
    assert checked == 20


def test_acceptance_03_eight_region_tiling():
    """(240,240,155) at patch 128 tiles into exactly 8 anchored regions and
    later-wins merging is bitwise identical to sequential overwrite."""
    grid = plan_patch_grid((240, 240, 155), (128, 128, 128))
    assert len(grid.starts) == 8
    assert list(grid.starts) == list(itertools.product((0, 112), (0, 112), (0, 27)))

    rng = np.random.default_rng(3)
    outputs = []
    for _ in range(8):
        raw = rng.random((4, 128, 128, 128)).astype(np.float32) + 0.01
        outputs.append(raw / raw.sum(axis=0, keepdims=True))

    merged = merge_patches(grid, outputs, strategy="later_wins")

    canvas = np.zeros((4,) + tuple(grid.padded_shape), dtype=np.float32)
    for (z, y, x), out in zip(grid.starts, outputs):
        canvas[:, z:z + 128, y:y + 128, x:x + 128] = out
    oracle = canvas[:, :240, :240, :155]
    assert np.array_equal(merged.data, oracle)


def test_acceptance_04_postprocessing_boundaries():
    """ET relabel boundary at 300/301 and component-size boundary at 14/15."""
    def et_labels(count):
        data = np.zeros((20, 20, 20), dtype=np.uint8)
        flat = data.reshape(-1)
        flat[:count] = 4
        return _label_volume(flat.reshape(20, 20, 20))

    relabeled = et_replacement(et_labels(300), threshold=300)
    assert (relabeled.data == 1).sum() == 300
    assert not (relabeled.data == 4).any()

    kept = et_replacement(et_labels(301), threshold=300)
    assert (kept.data == 4).sum() == 301
    assert not (kept.data == 1).any()

    data = np.zeros((20, 40, 20), dtype=np.uint8)
    data[2:4, 2:9, 2:3] = 2          # 2*7*1 = 14 voxels
    data[10:13, 10:15, 10:11] = 2    # 3*5*1 = 15 voxels
    cleaned = remove_small_components(_label_volume(data), min_size=15,
                                      connectivity=26)
    assert not cleaned.data[2:4, 2:9, 2:3].any()
    assert (cleaned.data[10:13, 10:15, 10:11] == 2).all()

    rng = np.random.default_rng(11)
    mixed = np.zeros((24, 24, 24), dtype=np.uint8)
    mixed[4:12, 4:12, 4:12] = 1
    mixed[6:10, 6:10, 6:10] = 4
    mixed[12:20, 12:20, 12:20] = 2
    mixed[rng.random(mixed.shape) < 0.01] = 4
    before = region_decompose(_label_volume(mixed))
    assert 0 < (mixed == 4).sum() <= 300
    after = region_decompose(et_replacement(_label_volume(mixed), 300))
    assert np.array_equal(before.tc, after.tc)
    assert np.array_equal(before.wt, after.wt)
    assert not after.et.any()


def _flood_fill(mask, connectivity):
    if connectivity == 6:
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                   (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offsets = [(dz, dy, dx)
                   for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                   if (dz, dy, dx) != (0, 0, 0)]
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_id = 0
    for seed in zip(*np.nonzero(mask)):
        if labels[seed]:
            continue
        next_id += 1
        stack = [seed]
        labels[seed] = next_id
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in offsets:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= c < s for c, s in zip(n, mask.shape)) \
                        and mask[n] and not labels[n]:
                    labels[n] = next_id
                    stack.append(n)
    return labels


def _same_partition(a, b):
    if not np.array_equal(a > 0, b > 0):
        return False
    pairs = set(zip(a[a > 0].ravel(), b[a > 0].ravel()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


def test_acceptance_05_cca_oracle_equivalence():
    """Component labeling partitions match an independent flood fill."""
    rng = np.random.default_rng(5)
    for i in range(100):
        mask = rng.random((24, 24, 24)) < 0.5
        for connectivity in (6, 26):
            ours = connected_components(mask, connectivity=connectivity).labels
            oracle = _flood_fill(mask, connectivity)
            assert _same_partition(ours, oracle), (i, connectivity)


def _brute_force_hd95(a, b, spacing):
    sa = np.argwhere(binary_surface(a)).astype(np.float64) * np.asarray(spacing)
    sb = np.argwhere(binary_surface(b)).astype(np.float64) * np.asarray(spacing)
    d2 = ((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1))
    d_ba = np.sqrt(d2.min(axis=0))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def test_acceptance_06_metric_oracles():
    """dice/hd95 vs exhaustive oracles, pinned point case, empty conventions."""
    rng = np.random.default_rng(6)
    done = 0
    while done < 50:
        shape = tuple(int(s) for s in rng.integers(8, 17, size=3))
        a = rng.random(shape) < float(rng.uniform(0.05, 0.4))
        b = rng.random(shape) < float(rng.uniform(0.05, 0.4))
        if not a.any() or not b.any():
            continue
        spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, size=3))
        expected_dice = 2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum())
        assert abs(dice(a, b) - expected_dice) < 1e-9
        assert abs(hd95(a, b, spacing) - _brute_force_hd95(a, b, spacing)) < 1e-9
        done += 1

    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2, 2, 2] = True
    b[2, 2, 5] = True
    assert hd95(a, b) == 3.0

    empty = np.zeros((8, 8, 8), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert hd95(empty, empty) == 0.0
    assert dice(a, empty) == 0.0
    assert hd95(a, empty) == HD95_PENALTY == 373.1287


def test_acceptance_07_ensemble_weights():
    """Published weight sets validate; fusion matches hand computation;
    self-ensembles preserve argmax."""
    two = EnsembleWeights(**TWO_MODEL)
    three = EnsembleWeights(**THREE_MODEL)
    for weights in (two, three):
        for vec in (weights.ncr, weights.ed, weights.et):
            assert abs(sum(vec) - 1.0) <= 1e-6

    def constant_member(vec):
        data = np.zeros((4, 6, 6, 6), dtype=np.float32)
        data += np.asarray(vec, dtype=np.float32)[:, None, None, None]
        return ProbabilityVolume(data=data, spacing=(1.0, 1.0, 1.0), case_id="t")

    fused = ensemble_average(
        [constant_member((0.25, 0.25, 0.25, 0.25)),
         constant_member((0.1, 0.2, 0.3, 0.4))], two)
    expected = np.array([0.175, 0.225, 0.265, 0.31]) / 0.975
    assert np.allclose(fused.data[:, 0, 0, 0], expected, atol=1e-6)

    rng = np.random.default_rng(17)
    probs = _random_probs(rng, (10, 12, 9))
    single = argmax_labels(probs)
    for weights, copies in ((two, 2), (three, 3)):
        fused = ensemble_average([probs] * copies, weights)
        assert np.array_equal(argmax_labels(fused).data, single.data)


class _PointwisePredictor:
    """Logits depend only on each voxel's own intensities, so the model is
    exactly equivariant under any spatial permutation."""

    def __call__(self, patch):
        logits = np.stack([patch[0], 2.0 * patch[1], patch[2] - patch[3],
                           0.5 * patch[0] * patch[3]])
        return logits.astype(np.float32)


def test_acceptance_08_tta_soundness():
    """inverse(forward(x)) == x for every member; flip TTA on an
    equivariant model reproduces the plain prediction."""
    counts = {"none": 1, "whd_flips": 4, "whd_flips_rot": 7,
              "whd_flips_rot_gamma": 9, "all_flips_rot": 11}
    rng = np.random.default_rng(8)
    for variant, expected in counts.items():
        members = tta_members(variant)
        assert len(members) == expected
        for member in members:
            arr = rng.random((4, 6, 10, 8)).astype(np.float32)
            restored = member.spatial_inverse(member.spatial_forward(arr))
            assert np.array_equal(restored, arr), (variant, member.name)

    data = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    vol = MultiModalVolume(data=data, spacing=(1.0, 1.0, 1.0), case_id="t")
    predictor = _PointwisePredictor()
    plain = predict_volume(predictor, vol, patch_size=(32, 32, 32))
    flipped = tta_predict(predictor, vol, "whd_flips", patch_size=(32, 32, 32))
    assert np.allclose(flipped.data, plain.data, atol=1e-5)


def test_acceptance_09_pretraining_pipeline(tmp_path):
    """Autoencoder MAE decreases over 10 epochs; the encoder transfers
    bit-exactly; warm starts win epoch 1 on >= 3 of 4 paired seeds."""
    model_cfg = ModelConfig(base_channels=8, encoder_stages=4, embed_dim=32,
                            tf_layers=1, tf_heads=2, dropout=0.0)
    ae_pairs = [generate_phantom(s, (32, 32, 32)) for s in range(4)]
    aug = AugmentConfig(regime="transbts", crop_size=(32, 32, 32), seed=0)
    encoder_path = pretrain(TrainConfig(epochs=10, lr=1e-2, seed=0),
                            model_cfg, ae_pairs, tmp_path / "pre",
                            augment_cfg=aug)
    curve = [json.loads(line)["loss"] for line in
             (tmp_path / "pre" / "pretrain_log.jsonl").read_text().splitlines()]
    assert len(curve) == 10
    assert curve[-1] < curve[0]

    model = build_model(model_cfg, seed=99)
    load_encoder_weights(model, encoder_path)
    tensors, manifest = load_checkpoint(encoder_path)
    assert manifest["encoder_only"]
    current = model.encoder.state_dict()
    for name, value in tensors.items():
        assert name.startswith("encoder.")
        assert np.array_equal(current[name[len("encoder."):]].numpy(), value)

    seg_pairs = [generate_phantom(s, (32, 32, 32)) for s in range(16)]
    wins = 0
    for seed in range(4):
        losses = {}
        for arm, init in (("cold", None), ("warm", encoder_path)):
            out = tmp_path / f"{arm}_{seed}"
            train(TrainConfig(epochs=1, lr=3e-3, seed=seed), model_cfg,
                  seg_pairs, out,
                  augment_cfg=AugmentConfig(regime="transbts",
                                            crop_size=(32, 32, 32), seed=seed),
                  init_encoder=init)
            losses[arm] = json.loads(
                (out / "train_log.jsonl").read_text().splitlines()[0])["loss"]
        wins += losses["warm"] < losses["cold"]
    assert wins >= 3, f"warm start won only {wins}/4 paired seeds"


def test_acceptance_10_end_to_end_overfit(tmp_path):
    """A toy model overfits 2 phantoms within 300 steps, and the CLI
    pipeline produces a schema-valid, all-finite report."""
    pairs = [generate_phantom(s, (32, 32, 32)) for s in (100, 101)]
    model_cfg = ModelConfig(base_channels=8, encoder_stages=3, embed_dim=32,
                            tf_layers=1, tf_heads=2, dropout=0.0)
    cfg = TrainConfig(epochs=150, lr=1.5e-2, seed=0, max_steps=300)
    aug = AugmentConfig(regime="transbts", crop_size=(32, 32, 32), seed=0)
    ckpt = train(cfg, model_cfg, pairs, tmp_path / "overfit", augment_cfg=aug)
    _, manifest = load_checkpoint(ckpt)
    assert manifest["extra"]["global_step"] <= 300
    model, _, _ = load_model_from_checkpoint(ckpt)
    score = evaluate_training_dice(model, pairs)
    assert score >= 0.95, f"soft dice {score:.4f}"

    base = tmp_path / "cli"
    tiny_model = ["--set", "model.base_channels=4",
                  "--set", "model.encoder_stages=3",
                  "--set", "model.embed_dim=16", "--set", "model.tf_layers=1",
                  "--set", "model.tf_heads=2", "--set", "model.dropout=0.0"]
    tiny_aug = ["--set", "augment.crop_size=[32,32,32]"]
    data = ["--set", f'paths.data_dir="{base}/data"']
    assert main(["phantom", "--count", "4", "--shape", "32", "32", "32",
                 "--out", f"{base}/data", "--seed", "0"]) == 0
    assert main(["pretrain", *tiny_model, *tiny_aug, *data,
                 "--set", "train.epochs=2", "--set", "train.lr=0.001",
                 "--out", f"{base}/pre"]) == 0
    assert main(["train", *tiny_model, *tiny_aug, *data,
                 "--set", "train.epochs=5", "--set", "train.max_steps=20",
                 "--set", "train.lr=0.01",
                 "--init-encoder", f"{base}/pre/encoder.ckpt",
                 "--out", f"{base}/run"]) == 0
    assert main(["predict", "--set", "inference.patch_size=[32,32,32]", *data,
                 "--model", f"{base}/run/final.ckpt",
                 "--out", f"{base}/pred"]) == 0
    assert main(["postprocess", "--pred-dir", f"{base}/pred",
                 "--out", f"{base}/post"]) == 0
    assert main(["evaluate", "--pred-dir", f"{base}/post",
                 "--pred-suffix", "_post", "--gt-dir", f"{base}/data",
                 "--out", f"{base}/eval"]) == 0

    report = json.loads((base / "eval" / "report.json").read_text())
    assert set(report) == {"cases", "mean"}
    assert len(report["cases"]) == 4
    for entry in report["cases"] + [report["mean"]]:
        for region in ("et", "tc", "wt"):
            for key in ("dice", "hd95", "sensitivity", "specificity"):
                assert np.isfinite(entry[region][key])


def test_acceptance_11_architecture_audit():
    """SE in every encoder stage, one extra stage pair vs baseline, and a
    3-block residual positional encoding that zeroes to identity."""
    cfg = ModelConfig(base_channels=4, encoder_stages=5, embed_dim=16,
                      tf_layers=1, tf_heads=2, dropout=0.0)
    deep = build_model(cfg, seed=0)
    shallow = build_model(ModelConfig(base_channels=4, encoder_stages=4,
                                      embed_dim=16, tf_layers=1, tf_heads=2,
                                      dropout=0.0), seed=0)
    assert len(deep.encoder.stages) == len(shallow.encoder.stages) + 1
    assert len(deep.decoder_stages) == len(shallow.decoder_stages) + 1
    for i, stage in enumerate(deep.encoder.stages):
        se_params = [n for n, _ in stage.named_parameters()
                     if n.startswith("se.")]
        assert se_params, f"encoder stage {i} lacks SE parameters"

    pe_modules = [m for n, m in deep.named_modules()
                  if isinstance(m, MlpPositionalEncoding)]
    assert len(pe_modules) == 1
    assert len(pe_modules[0].blocks) == 3

    pe = MlpPositionalEncoding(16, blocks=3)
    with torch.no_grad():
        for p in pe.parameters():
            p.zero_()
    pe.eval()
    torch.manual_seed(11)
    x = torch.randn(1, 16, 4, 5, 6)
    torch.testing.assert_close(pe(x), x, rtol=0, atol=1e-6)
