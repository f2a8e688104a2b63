"""Scikit-learn style wrapper: ``fit`` trains on annotated sequences, ``predict`` tracks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, parse_config
from .evaluation import frame_metrics
from .tracker import SiameseTracker
from .training import train
from .validation import check_box, check_sequences


class MAPNetTracker(BaseEstimator):
    """Single-object tracker estimator.

    ``X`` is a list of sequences, each a list (or ``(T, H, W, 3)`` array) of
    RGB frames. ``y`` is a matching list of ``(T, 4)`` xywh box arrays. Tracking
    only needs the first box of each sequence, so ``predict`` takes ``y`` or an
    ``init_boxes`` list.

    Parameters
    ----------
    config : path, dict of dotted overrides, RunConfig or None
    iterations : overrides the configured number of training steps
    seed : training seed
    """

    def __init__(self, config=None, iterations=None, seed=0):
        self.config = config
        self.iterations = iterations
        self.seed = seed

    def _resolve_config(self) -> RunConfig:
        if isinstance(self.config, RunConfig):
            cfg = self.config
        elif isinstance(self.config, dict):
            cfg = RunConfig().replace(**self.config)
        else:
            cfg = parse_config(self.config)
        return cfg.replace(**{"train.seed": int(self.seed)})

    def fit(self, X, y):
        frames, boxes = check_sequences(X, y)
        cfg = self._resolve_config()
        result = train(cfg, [(np.stack(f), b) for f, b in zip(frames, boxes)], iterations=self.iterations)
        self.config_ = cfg
        self.model_ = result.model
        self.history_ = result.history
        self.n_sequences_ = len(frames)
        return self

    def predict(self, X, init_boxes=None):
        """One ``(T, 4)`` array of predicted xywh boxes per sequence (row 0 echoes the init box)."""
        check_is_fitted(self, "model_")
        frames, _ = check_sequences(X)
        if init_boxes is None:
            raise ValueError("predict needs the first-frame box of every sequence (init_boxes)")
        init_boxes = [np.asarray(b, dtype=np.float64) for b in init_boxes]
        if len(init_boxes) != len(frames):
            raise ValueError(f"{len(frames)} sequences but {len(init_boxes)} initial boxes")
        tracker = SiameseTracker(self.model_, self.config_)
        out = []
        for seq, box in zip(frames, init_boxes):
            box = check_box(box if box.ndim == 1 else box[0])
            boxes, _ = tracker.track(seq, box)
            out.append(boxes)
        return out

    def score(self, X, y):
        """Average overlap (mean IoU) over all frames after the first."""
        frames, boxes = check_sequences(X, y)
        preds = self.predict(frames, [b[0] for b in boxes])
        ious = [frame_metrics(p[1:], g[1:])[0] for p, g in zip(preds, boxes) if len(g) > 1]
        return float(np.nanmean(np.concatenate(ious))) if ious else float("nan")
