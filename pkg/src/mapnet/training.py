"""Optimization loop: AdamW with separate backbone / head learning rates and a
single step decay after ``lr_drop_fraction`` of the iterations."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import PairSampler, PairSamplingConfig, SyntheticSequenceConfig, generate_dataset, load_dataset
from .errors import DataError, NumericError
from .losses import LossWeights, assign_labels, total_loss
from .model import MAPNet, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: MAPNet
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def pair_config(cfg: RunConfig) -> PairSamplingConfig:
    t = cfg.train
    return PairSamplingConfig(
        template_size=cfg.model.template_size, search_size=cfg.model.search_size,
        template_factor=cfg.tracker.template_factor, search_factor=cfg.tracker.search_factor,
        max_frame_gap=t.max_frame_gap, shift_jitter=t.shift_jitter, scale_jitter=t.scale_jitter,
        brightness_jitter=t.brightness_jitter, pad_fill=tuple(float(m) * 255.0 for m in cfg.backbone.mean))


def synthetic_config(cfg: RunConfig) -> SyntheticSequenceConfig:
    size = cfg.data.frame_size
    base = SyntheticSequenceConfig()
    # smallest side stays >= 8 px even at the lower end of the scale drift range
    lo = max(8.0 / base.scale_range[0], size / 10.0)
    return SyntheticSequenceConfig(frame_size=(size, size), length=cfg.data.length, object_size=(lo, 2 * lo))


def training_sources(cfg: RunConfig):
    """Sequences from ``data.root`` (or the data-root environment variable), else synthetic ones."""
    root = cfg.data_root()
    if root:
        sources = [(frames, boxes) for _, frames, boxes in load_dataset(root)]
        if not sources:
            raise DataError(f"no sequences under {root}")
        return sources
    return [(frames, boxes) for _, frames, boxes in
            generate_dataset(cfg.data.sequences, cfg.data.seed, synthetic_config(cfg))]


def make_optimizer(model: MAPNet, cfg: RunConfig):
    backbone, other = model.parameter_groups()
    t = cfg.train
    optimizer = torch.optim.AdamW([
        {"params": backbone, "lr": t.lr_backbone, "name": "backbone"},
        {"params": other, "lr": t.lr_other, "name": "other"},
    ], weight_decay=t.weight_decay)
    drop_at = max(1, int(round(t.lr_drop_fraction * t.total_iterations)))
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=drop_at, gamma=t.lr_drop_factor)
    return optimizer, scheduler


def batch_tensors(model: MAPNet, batch, dtype=torch.float32):
    templates, searches, gts = batch
    z = model.standardize(torch.from_numpy(templates).to(dtype))
    x = model.standardize(torch.from_numpy(searches).to(dtype))
    return z, x, torch.from_numpy(gts).to(dtype)


def train(cfg: RunConfig, sources=None, out_dir=None, model: MAPNet | None = None,
          iterations: int | None = None, progress=None, sampler=None) -> TrainResult:
    """Run the training loop.

    ``sources`` is a list of ``(frames, boxes)``; when omitted they come from
    :func:`training_sources`. With ``out_dir`` a ``train_log.jsonl`` and a final
    checkpoint archive (``out_dir/checkpoint``) are written. ``sampler`` replaces
    the default :class:`PairSampler`; anything with ``batch(batch_size)`` works.
    """
    t = cfg.train
    torch.manual_seed(t.seed)
    if model is None:
        model = build_model(cfg, seed=t.seed)
    if sampler is None:
        if sources is None:
            sources = training_sources(cfg)
        sampler = PairSampler(sources, pair_config(cfg), seed=t.seed)
    optimizer, scheduler = make_optimizer(model, cfg)
    weights = LossWeights(cfg.loss.beta, cfg.loss.lambda_giou, cfg.loss.lambda_l1)
    grid = cfg.search_grid
    total = t.total_iterations if iterations is None else iterations

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    history = []
    model.train()
    try:
        for step in range(1, total + 1):
            batch = sampler.batch(t.batch_size)
            z, x, gt = batch_tensors(model, batch)
            mask = assign_labels(gt.double(), grid)
            out = model(z, x)
            losses = total_loss(out["logits"], out["boxes"], gt, mask, weights, cfg.loss.cls_mode, cfg.loss.reg_mode)
            loss = losses["total"]
            if not torch.isfinite(loss):
                dump = _dump_batch(out_dir, step, batch)
                raise NumericError(f"non-finite loss at step {step}" + (f"; batch saved to {dump}" if dump else ""))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if t.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), t.grad_clip)
            optimizer.step()
            scheduler.step()
            record = {"step": step, "loss": loss.item(), "cls": losses["cls"].item(), "reg": losses["reg"].item()}
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if progress is not None:
                progress(record)
            elif step % t.log_every == 0:
                log.info("step %d loss %.4f (cls %.4f reg %.4f)", step, record["loss"], record["cls"], record["reg"])
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "checkpoint", model, cfg, {"train_steps": total})
    return TrainResult(model, history, ckpt)


def _dump_batch(out_dir, step, batch):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_batch_{step:06d}.npz"
    np.savez(path, templates=batch[0], searches=batch[1], gts=batch[2])
    return path


def trailing_mean(history: list[dict], step: int, window: int = 10) -> float:
    vals = [h["loss"] for h in history if step - window < h["step"] <= step]
    return float(np.mean(vals)) if vals else math.nan
