"""Box conventions, square crops and the crop <-> image affine map.

Pixel coordinates are continuous with pixel ``i`` covering ``[i, i+1)``.
Boxes are either ``xywh`` (annotation files) or ``xyxy`` corners.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ContractError


def xywh_to_xyxy(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:4]], axis=-1)


def xyxy_to_xywh(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., 2:4] - b[..., :2]], axis=-1)


def sort_corners(box) -> np.ndarray:
    """Repair degenerate corner boxes so that x1 <= x2 and y1 <= y2."""
    b = np.asarray(box, dtype=np.float64)
    return np.stack([np.minimum(b[..., 0], b[..., 2]), np.minimum(b[..., 1], b[..., 3]),
                     np.maximum(b[..., 0], b[..., 2]), np.maximum(b[..., 1], b[..., 3])], axis=-1)


@dataclass(frozen=True)
class CropGeometry:
    """Square crop of side ``side`` pixels centred at ``center``, resampled to ``out_size``."""

    center: tuple[float, float]
    side: float
    out_size: int
    pad_fill: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.side > 0:
            raise ContractError(f"crop side must be positive, got {self.side}")

    @property
    def origin(self) -> tuple[float, float]:
        return self.center[0] - self.side / 2.0, self.center[1] - self.side / 2.0

    @property
    def scale(self) -> float:
        """Image pixels per crop pixel."""
        return self.side / self.out_size

    def encode(self, box_xyxy) -> np.ndarray:
        """Image-pixel corners -> normalized crop frame (unit square = crop)."""
        b = np.asarray(box_xyxy, dtype=np.float64)
        ox, oy = self.origin
        return (b - np.array([ox, oy, ox, oy])) / self.side

    def decode(self, box_norm) -> np.ndarray:
        """Normalized crop frame -> image-pixel corners."""
        b = np.asarray(box_norm, dtype=np.float64)
        ox, oy = self.origin
        return b * self.side + np.array([ox, oy, ox, oy])


def decode_box(box_norm, geometry: CropGeometry) -> np.ndarray:
    return geometry.decode(box_norm)


def crop_geometry(box_xywh, area_factor: float, out_size: int, pad_fill=(0.0, 0.0, 0.0),
                  center_offset=(0.0, 0.0), scale_jitter: float = 1.0) -> CropGeometry:
    x, y, w, h = (float(v) for v in box_xywh)
    if not (w > 0 and h > 0):
        raise ContractError(f"box must have positive area, got w={w}, h={h}")
    side = area_factor * math.sqrt(w * h) * scale_jitter
    cx, cy = x + w / 2.0 + center_offset[0], y + h / 2.0 + center_offset[1]
    return CropGeometry((cx, cy), side, int(out_size), tuple(float(v) for v in pad_fill))


def warp_crop(frame: np.ndarray, geometry: CropGeometry) -> np.ndarray:
    """Resample the crop described by ``geometry`` with bilinear interpolation.

    Out-of-frame regions take ``geometry.pad_fill``. Returns float32 ``(S, S, 3)``.
    """
    if frame.ndim != 3 or frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ContractError(f"expected an (H, W, 3) frame, got shape {frame.shape}")
    s = geometry.out_size / geometry.side
    ox, oy = geometry.origin
    # cv2 indexes pixel centres; shift the continuous-coordinate map by half a pixel
    tx = s * 0.5 - 0.5 - s * ox
    ty = s * 0.5 - 0.5 - s * oy
    m = np.array([[s, 0.0, tx], [0.0, s, ty]], dtype=np.float64)
    src = np.ascontiguousarray(frame, dtype=np.float32)
    return cv2.warpAffine(src, m, (geometry.out_size, geometry.out_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(v) for v in geometry.pad_fill))


def crop_patch(frame: np.ndarray, box_xywh, area_factor: float, out_size: int,
               pad_fill=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, CropGeometry]:
    """Square crop around ``box`` whose area is ``area_factor**2`` times the box area."""
    geometry = crop_geometry(box_xywh, area_factor, out_size, pad_fill)
    return warp_crop(frame, geometry), geometry


def hanning_window(size: int) -> np.ndarray:
    """Outer product of two Hann sequences, max-normalized to 1."""
    hann = np.hanning(size)
    window = np.outer(hann, hann)
    return window / window.max()
