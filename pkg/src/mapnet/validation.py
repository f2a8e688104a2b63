"""Input checks shared by the estimator, the tracker and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_frame(frame) -> np.ndarray:
    """An ``(H, W, 3)`` uint8 image; float frames in [0, 255] are rounded."""
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"frames must be (H, W, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError("frame is empty")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or not np.all(np.isfinite(arr)):
            raise ContractError("frame values must be finite numbers")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


def check_box(box) -> np.ndarray:
    """A finite ``(x, y, w, h)`` box with positive size."""
    arr = np.asarray(box, dtype=np.float64).reshape(-1)
    if arr.shape != (4,) or not np.all(np.isfinite(arr)):
        raise ContractError(f"box must be four finite numbers (x, y, w, h), got {box!r}")
    if arr[2] <= 0 or arr[3] <= 0:
        raise ContractError(f"box must have positive width and height, got {arr.tolist()}")
    return arr


def check_sequence(frames, boxes=None):
    """Validate a sequence; returns ``(frames, boxes)`` with boxes as ``(T, 4)`` or None."""
    frames = [check_frame(f) for f in frames]
    if not frames:
        raise ContractError("sequence has no frames")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ContractError("all frames of a sequence must share one size")
    if boxes is None:
        return frames, None
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape != (len(frames), 4):
        raise ContractError(f"expected ({len(frames)}, 4) boxes, got {boxes.shape}")
    check_box(boxes[0])
    return frames, boxes


def check_sequences(X, y=None):
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
        y = None if y is None else [y]
    X = list(X)
    if not X:
        raise ContractError("need at least one sequence")
    if y is None:
        return [check_sequence(f)[0] for f in X], None
    y = list(y)
    if len(y) != len(X):
        raise ContractError(f"{len(X)} sequences but {len(y)} box arrays")
    pairs = [check_sequence(f, b) for f, b in zip(X, y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]
