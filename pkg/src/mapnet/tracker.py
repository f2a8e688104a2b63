"""Frame-by-frame inference with a fixed template and Hanning-window re-ranking."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .config import RunConfig
from .errors import ContractError
from .geometry import crop_geometry, crop_patch, hanning_window, sort_corners, warp_crop, xyxy_to_xywh
from .heads import foreground_probability
from .model import MAPNet


def apply_window_penalty(scores, window, penalty: float) -> np.ndarray:
    """``(1 - penalty) * scores + penalty * window``."""
    scores = np.asarray(scores, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if scores.shape != window.shape:
        raise ContractError(f"score shape {scores.shape} != window shape {window.shape}")
    if not 0.0 <= penalty <= 1.0:
        raise ContractError(f"window penalty must lie in [0, 1], got {penalty}")
    return (1.0 - penalty) * scores + penalty * window


@dataclass(frozen=True)
class TrackerState:
    template_tokens: torch.Tensor
    prev_box: tuple[float, float, float, float]
    window: np.ndarray
    penalty: float
    frame_size: tuple[int, int]


class SiameseTracker:
    """Wraps a trained :class:`MAPNet` for one-pass tracking.

    The functional pair :meth:`init` / :meth:`track_step` threads an explicit
    :class:`TrackerState`; :meth:`initialize` / :meth:`update` keep it internally.
    """

    def __init__(self, model: MAPNet, cfg: RunConfig | None = None):
        self.model = model.eval()
        self.cfg = cfg or model.cfg
        self.dtype = next(model.parameters()).dtype
        mean = np.asarray(self.cfg.backbone.mean) * 255.0
        self.pad_fill = tuple(float(v) for v in mean)
        self.state: TrackerState | None = None

    def _to_tensor(self, patch: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(patch)).to(self.dtype)[None]
        return self.model.standardize(t)

    @torch.no_grad()
    def init(self, frame: np.ndarray, box_xywh) -> TrackerState:
        _check_frame(frame)
        t = self.cfg.tracker
        patch, _ = crop_patch(frame, box_xywh, t.template_factor, self.cfg.model.template_size, self.pad_fill)
        tokens = self.model.encode(self._to_tensor(patch))
        grid = self.cfg.search_grid
        return TrackerState(tokens, tuple(float(v) for v in box_xywh), hanning_window(grid).reshape(-1),
                            t.window_penalty, frame.shape[:2])

    @torch.no_grad()
    def track_step(self, state: TrackerState, frame: np.ndarray):
        """Returns ``(box_xywh, confidence, new_state)``."""
        _check_frame(frame)
        t = self.cfg.tracker
        geometry = crop_geometry(state.prev_box, t.search_factor, self.cfg.model.search_size, self.pad_fill)
        search = self._to_tensor(warp_crop(frame, geometry))
        out = self.model.predict_tokens(state.template_tokens, self.model.encode(search))
        scores = foreground_probability(out["logits"])[0].double().cpu().numpy()
        boxes = out["boxes"][0].double().cpu().numpy()
        ranked = apply_window_penalty(scores, state.window, state.penalty)
        best = int(np.argmax(ranked))
        box = xyxy_to_xywh(geometry.decode(sort_corners(boxes[best])))
        box[2:] = np.maximum(box[2:], t.min_box_size)
        new_state = replace(state, prev_box=tuple(float(v) for v in box), frame_size=frame.shape[:2])
        return box, float(scores[best]), new_state

    def initialize(self, frame: np.ndarray, box_xywh) -> None:
        self.state = self.init(frame, box_xywh)

    def update(self, frame: np.ndarray):
        if self.state is None:
            raise ContractError("tracker used before initialize()")
        box, score, self.state = self.track_step(self.state, frame)
        return box, score

    def track(self, frames, init_box) -> tuple[np.ndarray, np.ndarray]:
        """Track a whole sequence; the first row echoes ``init_box`` with score 1."""
        self.initialize(frames[0], init_box)
        boxes = [np.asarray(init_box, dtype=np.float64)]
        scores = [1.0]
        for frame in frames[1:]:
            box, score = self.update(frame)
            boxes.append(box)
            scores.append(score)
        return np.stack(boxes), np.asarray(scores)


def _check_frame(frame: np.ndarray) -> None:
    if not isinstance(frame, np.ndarray) or frame.ndim != 3 or frame.shape[2] != 3:
        raise ContractError(f"frames must be (H, W, 3) arrays, got {getattr(frame, 'shape', type(frame))}")
    if frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ContractError("frame is empty")


def format_results(boxes: np.ndarray, scores: np.ndarray) -> str:
    """``x,y,w,h,score`` text, one line per frame."""
    return "".join(f"{b[0]:.4f},{b[1]:.4f},{b[2]:.4f},{b[3]:.4f},{s:.6f}\n" for b, s in zip(boxes, scores))
