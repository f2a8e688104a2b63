import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from mapnet.checkpoint import load_checkpoint, read_manifest, read_tensors, save_checkpoint, write_tensors
from mapnet.data import (PairSampler, PairSamplingConfig, SyntheticSequenceConfig, generate_dataset,
                         generate_synthetic_sequence, load_dataset, mask_to_box, read_boxes, sample_training_pair,
                         write_dataset)
from mapnet.errors import ConfigurationError, DataError, NumericError
from mapnet.geometry import crop_geometry, xywh_to_xyxy
from mapnet.model import build_model
from mapnet.training import pair_config, trailing_mean, train, training_sources

SMALL = SyntheticSequenceConfig((96, 96), 10, object_size=(12, 20))


def test_sequence_determinism():
    a = generate_synthetic_sequence(SMALL, 5)
    b = generate_synthetic_sequence(SMALL, 5)
    c = generate_synthetic_sequence(SMALL, 6)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])
    assert a[0].shape == (10, 96, 96, 3) and a[0].dtype == np.uint8


def test_boxes_tightly_bound_masks():
    frames, boxes, masks = generate_synthetic_sequence(SMALL, 11, return_masks=True)
    for box, mask in zip(boxes, masks):
        ys, xs = np.nonzero(mask)  # independent scan
        assert box.tolist() == [xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1]
        assert box[2] >= 8 and box[3] >= 8
    assert np.array_equal(mask_to_box(masks[0]), boxes[0])


def test_zero_velocity_gives_constant_box():
    cfg = SyntheticSequenceConfig((96, 96), 8, object_size=(12, 20), max_speed=0.0, jitter=0.0, scale_drift=0.0)
    _, boxes = generate_synthetic_sequence(cfg, 2)
    assert np.all(boxes == boxes[0])


def test_object_too_large_is_rejected():
    with pytest.raises(ConfigurationError):
        generate_synthetic_sequence(SyntheticSequenceConfig((64, 64), 5, object_size=(40, 60)), 0)


def test_shift_moves_normalized_centre():
    geo = crop_geometry([100, 100, 64, 64], 4, 256)
    gt = np.array([100, 100, 164, 164], dtype=float)
    a = geo.encode(gt)
    b = geo.encode(gt + 32)
    np.testing.assert_allclose(b - a, 0.125, rtol=0, atol=1e-15)


def test_zero_jitter_pair_is_centred():
    frames, boxes = generate_synthetic_sequence(SMALL, 3)
    cfg = PairSamplingConfig(template_size=32, search_size=64, shift_jitter=0, scale_jitter=0, brightness_jitter=0)
    t, s, gt = sample_training_pair(frames, boxes, np.random.default_rng(0), cfg)
    assert t.shape == (32, 32, 3) and s.shape == (64, 64, 3)
    np.testing.assert_allclose([(gt[0] + gt[2]) / 2, (gt[1] + gt[3]) / 2], [0.5, 0.5], rtol=0, atol=1e-12)


def test_still_image_uses_same_frame():
    frames, boxes = generate_synthetic_sequence(SMALL, 3)
    cfg = PairSamplingConfig(template_size=32, search_size=64)
    _, _, gt = sample_training_pair(frames[:1], boxes[:1], np.random.default_rng(1), cfg)
    assert gt.shape == (4,)


def test_ground_truth_always_intersects_crop():
    frames, boxes = generate_synthetic_sequence(SMALL, 4)
    sampler = PairSampler([(frames, boxes)], PairSamplingConfig(template_size=32, search_size=64, shift_jitter=0.5),
                          seed=3)
    _, _, gts = sampler.batch(64)
    assert np.all(gts[:, 2] > 0) and np.all(gts[:, 0] < 1) and np.all(gts[:, 3] > 0) and np.all(gts[:, 1] < 1)


def test_dataset_round_trip(tmp_path):
    seqs = generate_dataset(2, 9, SMALL)
    write_dataset(tmp_path, seqs)
    back = load_dataset(tmp_path)
    assert [n for n, _, _ in back] == [n for n, _, _ in seqs]
    for (_, f0, b0), (_, f1, b1) in zip(seqs, back):
        assert np.array_equal(np.stack(f1), f0) and np.array_equal(b1, b0)
    assert (tmp_path / seqs[0][0] / "frames" / "00000001.png").exists()
    (tmp_path / "bad.txt").write_text("1,2,3\n")
    with pytest.raises(DataError):
        read_boxes(tmp_path / "bad.txt")


# ---- training ---------------------------------------------------------------

class FixedBatch:
    def __init__(self, batch):
        self.fixed = batch

    def batch(self, n):
        return self.fixed


def _sources(cfg):
    return training_sources(cfg)


def test_zero_learning_rate_freezes_parameters():
    cfg = tiny_config(**{"train.lr_backbone": 0.0, "train.lr_other": 0.0, "train.weight_decay": 0.0})
    model = build_model(cfg, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(cfg, _sources(cfg), model=model, iterations=3)
    for k, v in model.state_dict().items():
        if "running_" in k or "num_batches" in k:
            continue  # batch-norm statistics are not parameters
        assert torch.equal(v, before[k]), k


@pytest.mark.parametrize("frozen", ["backbone", "other"])
def test_two_group_learning_rates(frozen):
    lrs = {"backbone": 1e-3, "other": 1e-3, frozen: 0.0}
    cfg = tiny_config(**{"train.lr_backbone": lrs["backbone"], "train.lr_other": lrs["other"],
                         "train.weight_decay": 0.0})
    model = build_model(cfg, seed=0)
    backbone_names = {f"backbone.{n}" for n, _ in model.backbone.named_parameters()}
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train(cfg, _sources(cfg), model=model, iterations=3)
    for n, p in model.named_parameters():
        in_frozen_group = (n in backbone_names) == (frozen == "backbone")
        if in_frozen_group:
            assert torch.equal(p, before[n]), n
    changed = [n for n, p in model.named_parameters() if not torch.equal(p, before[n])]
    assert changed and all(((n in backbone_names) != (frozen == "backbone")) for n in changed)


def test_optimizer_groups_and_schedule():
    from mapnet.training import make_optimizer

    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    opt, sched = make_optimizer(model, cfg)
    assert [g["lr"] for g in opt.param_groups] == [1e-5, 1e-4]
    assert all(g["weight_decay"] == 1e-4 for g in opt.param_groups)
    assert isinstance(opt, torch.optim.AdamW)
    assert sched.step_size == round(2 / 3 * cfg.train.total_iterations)


def test_overfit_single_batch():
    cfg = tiny_config(**{"train.lr_backbone": 1e-3, "train.lr_other": 1e-3, "train.batch_size": 4,
                         "train.grad_clip": 1.0, "train.iterations_per_epoch": 200, "train.lr_drop_fraction": 1.0})
    batch = PairSampler(_sources(cfg), pair_config(cfg), seed=0).batch(4)
    result = train(cfg, sampler=FixedBatch(batch))
    assert trailing_mean(result.history, 200) < 0.5 * trailing_mean(result.history, 20)


def test_seeded_training_is_reproducible():
    cfg = tiny_config(**{"train.lr_backbone": 1e-3, "train.lr_other": 1e-3})
    a = train(cfg, _sources(cfg), iterations=10).history
    b = train(cfg, _sources(cfg), iterations=10).history
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_log_and_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    result = train(cfg, _sources(cfg), out_dir=tmp_path, iterations=3)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and set(json.loads(lines[0])) == {"step", "loss", "cls", "reg"}
    manifest = read_manifest(result.checkpoint)
    assert manifest["loss_weights"] == {"beta": 0.0625, "lambda_giou": 2.0, "lambda_l1": 5.0}
    assert manifest["weight_decay"] == 1e-4 and manifest["normalization_mode"] == "post_norm"
    assert manifest["standardization"]["mean"] == [0.485, 0.456, 0.406]
    model, cfg2, _ = load_checkpoint(result.checkpoint)
    assert cfg2 == cfg
    for k, v in result.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v), k
    z, x = torch.randn(2, 3, 32, 32), torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        a, b = result.model(z, x), model(z, x)
    assert torch.equal(a["logits"], b["logits"]) and torch.equal(a["boxes"], b["boxes"])


def test_params_bin_layout(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0])}
    entries = write_tensors(tmp_path / "params.bin", arrays)
    (tmp_path / "manifest.json").write_text(json.dumps({"tensors": entries}))
    blob = (tmp_path / "params.bin").read_bytes()
    # record: <u4 ndim> <u8 dims...> <little-endian data>
    assert blob[:4] == (2).to_bytes(4, "little")
    assert blob[4:12] == (2).to_bytes(8, "little") and blob[12:20] == (3).to_bytes(8, "little")
    assert np.array_equal(np.frombuffer(blob[20:44], dtype="<f4"), np.arange(6, dtype=np.float32))
    back = read_tensors(tmp_path)
    assert all(np.array_equal(back[k], arrays[k]) and back[k].dtype == arrays[k].dtype for k in arrays)


def test_non_finite_loss_aborts_with_dump(tmp_path):
    cfg = tiny_config()
    batch = PairSampler(_sources(cfg), pair_config(cfg), seed=0).batch(2)
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        model.cls_head.layers[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="non-finite"):
        train(cfg, model=model, sampler=FixedBatch(batch), out_dir=tmp_path, iterations=2)
    dumps = list(tmp_path.glob("nonfinite_batch_*.npz"))
    assert len(dumps) == 1 and set(np.load(dumps[0]).files) == {"templates", "searches", "gts"}


def test_save_is_deterministic(tmp_path):
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    save_checkpoint(tmp_path / "a", model, cfg)
    save_checkpoint(tmp_path / "b", model, cfg)
    for name in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
