"""Synthetic tracking sequences, dataset directories and training-pair sampling.

Dataset layout (GOT-10k style)::

    <root>/<sequence>/frames/00000001.png
    <root>/<sequence>/frames/00000002.png
    ...
    <root>/<sequence>/groundtruth.txt      # one "x,y,w,h" line per frame
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .geometry import crop_geometry, warp_crop, xywh_to_xyxy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSequenceConfig:
    frame_size: tuple[int, int] = (256, 256)  # (height, width)
    length: int = 60
    shape: str = "random"  # rectangle | ellipse | random
    object_size: tuple[float, float] = (24.0, 48.0)  # initial side range, pixels
    max_speed: float = 3.0  # pixels / frame
    jitter: float = 0.5  # std of per-frame positional noise, pixels
    scale_drift: float = 0.02  # max log-scale change per frame
    scale_range: tuple[float, float] = (0.75, 1.35)
    distractors: int = 3  # static background blobs

    def validate(self):
        h, w = self.frame_size
        if self.length < 1:
            raise ConfigurationError("sequence length must be >= 1")
        if self.shape not in ("rectangle", "ellipse", "random"):
            raise ConfigurationError(f"unknown object shape {self.shape!r}")
        lo, hi = self.object_size
        if lo < 8:
            raise ConfigurationError("objects must be at least 8 px on each side")
        largest = hi * self.scale_range[1]
        if largest >= min(h, w):
            raise ConfigurationError(
                f"object of up to {largest:.0f}px cannot stay inside a {w}x{h} frame")
        if self.scale_range[0] * lo < 8:
            raise ConfigurationError("scale range would shrink the object below 8 px")


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-amplitude, amplitude, size=(cells, cells, 3)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)


def _background(rng: np.random.Generator, h: int, w: int, distractors: int) -> np.ndarray:
    base = rng.uniform(60, 190, size=3).astype(np.float32)
    img = base + _smooth_noise(rng, h, w, 6, 45.0) + _smooth_noise(rng, h, w, 24, 12.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    for _ in range(distractors):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(6, 24, size=2)
        color = rng.uniform(0, 255, size=3).astype(np.float32)
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        img[mask] = 0.5 * img[mask] + 0.5 * color
    return img


@dataclass(frozen=True)
class _Appearance:
    shape: str
    color_a: np.ndarray
    color_b: np.ndarray
    angle: float
    frequency: float
    phase: float


def _appearance(rng: np.random.Generator, shape: str) -> _Appearance:
    if shape == "random":
        shape = "rectangle" if rng.random() < 0.5 else "ellipse"
    color_a = rng.uniform(0, 255, size=3)
    color_b = 255.0 - color_a + rng.uniform(-40, 40, size=3)
    return _Appearance(shape, color_a, np.clip(color_b, 0, 255), rng.uniform(0, math.pi), rng.uniform(1.5, 4.0),
                       rng.uniform(0, 2 * math.pi))


def _render(frame: np.ndarray, app: _Appearance, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    """Paint the object in place; returns its boolean pixel mask."""
    fh, fw = frame.shape[:2]
    x0, y0 = max(int(math.floor(cx - w / 2)) - 1, 0), max(int(math.floor(cy - h / 2)) - 1, 0)
    x1, y1 = min(int(math.ceil(cx + w / 2)) + 1, fw), min(int(math.ceil(cy + h / 2)) + 1, fh)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
    u = (xx - (cx - w / 2)) / w
    v = (yy - (cy - h / 2)) / h
    if app.shape == "rectangle":
        local = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    else:
        local = (2 * u - 1) ** 2 + (2 * v - 1) ** 2 <= 1.0
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * app.frequency * (u * math.cos(app.angle) + v * math.sin(app.angle))
                                 + app.phase)
    texture = stripes[..., None] * app.color_a + (1 - stripes[..., None]) * app.color_b
    region = frame[y0:y1, x0:x1]
    region[local] = texture[local]
    mask = np.zeros(frame.shape[:2], dtype=bool)
    mask[y0:y1, x0:x1] = local
    return mask


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight ``xywh`` box of a boolean mask (pixel-edge convention)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DataError("object mask is empty")
    return np.array([cols[0], rows[0], cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1], dtype=np.float64)


def generate_synthetic_sequence(cfg: SyntheticSequenceConfig, seed: int | np.random.SeedSequence,
                                return_masks: bool = False):
    """Render a moving textured object over a static textured background.

    Returns ``(frames, boxes)`` with frames ``(T, H, W, 3)`` uint8 and boxes
    ``(T, 4)`` xywh tightly bounding the rendered object.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.frame_size
    background = _background(rng, h, w, cfg.distractors)
    app = _appearance(rng, cfg.shape)
    ow, oh = rng.uniform(*cfg.object_size, size=2)
    scale = 1.0
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.3, 1.0) * cfg.max_speed
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    margin = ow * cfg.scale_range[1] / 2 + 1, oh * cfg.scale_range[1] / 2 + 1
    cx = rng.uniform(margin[0], w - margin[0])
    cy = rng.uniform(margin[1], h - margin[1])

    frames = np.empty((cfg.length, h, w, 3), dtype=np.uint8)
    boxes = np.empty((cfg.length, 4), dtype=np.float64)
    masks = []
    for t in range(cfg.length):
        if t > 0:
            cx += vx + rng.normal(0, cfg.jitter) if cfg.jitter > 0 else vx
            cy += vy + rng.normal(0, cfg.jitter) if cfg.jitter > 0 else vy
            if cfg.scale_drift > 0:
                scale = float(np.clip(scale * math.exp(rng.uniform(-cfg.scale_drift, cfg.scale_drift)),
                                      *cfg.scale_range))
            if not margin[0] <= cx <= w - margin[0]:
                vx = -vx
                cx = float(np.clip(cx, margin[0], w - margin[0]))
            if not margin[1] <= cy <= h - margin[1]:
                vy = -vy
                cy = float(np.clip(cy, margin[1], h - margin[1]))
        img = background.copy()
        mask = _render(img, app, cx, cy, ow * scale, oh * scale)
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        boxes[t] = mask_to_box(mask)
        if return_masks:
            masks.append(mask)
    if return_masks:
        return frames, boxes, np.stack(masks)
    return frames, boxes


def generate_dataset(n_sequences: int, seed: int, cfg: SyntheticSequenceConfig = SyntheticSequenceConfig()):
    """``n_sequences`` independent sequences as a list of ``(name, frames, boxes)``."""
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    return [(f"synthetic-{seed:04d}-{i:03d}", *generate_synthetic_sequence(cfg, child))
            for i, child in enumerate(children)]


def write_sequence(seq_dir, frames: np.ndarray, boxes: np.ndarray) -> Path:
    seq_dir = Path(seq_dir)
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames, start=1):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(seq_dir / "frames" / f"{i:08d}.png")
    write_boxes(seq_dir / "groundtruth.txt", boxes)
    return seq_dir


def write_boxes(path, boxes) -> None:
    lines = [",".join(f"{v:.10g}" for v in box) for box in np.asarray(boxes, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path) -> np.ndarray:
    rows = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        try:
            values = [float(p) for p in parts[:4]]
        except ValueError as exc:
            raise DataError(f"{path}:{line_no}: cannot parse box {line!r}") from exc
        if len(values) != 4:
            raise DataError(f"{path}:{line_no}: expected x,y,w,h")
        rows.append(values)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def frame_paths(seq_dir) -> list[Path]:
    frames = sorted((Path(seq_dir) / "frames").glob("*.png")) + sorted((Path(seq_dir) / "frames").glob("*.jpg"))
    return sorted(frames)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_sequence(seq_dir) -> tuple[list[np.ndarray], np.ndarray]:
    seq_dir = Path(seq_dir)
    gt_path = seq_dir / "groundtruth.txt"
    if not gt_path.exists():
        raise DataError(f"{seq_dir}: missing groundtruth.txt")
    paths = frame_paths(seq_dir)
    if not paths:
        raise DataError(f"{seq_dir}: no frames found")
    boxes = read_boxes(gt_path)
    if len(boxes) != len(paths):
        raise DataError(f"{seq_dir}: {len(paths)} frames but {len(boxes)} ground-truth boxes")
    return [load_frame(p) for p in paths], boxes


def list_sequences(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "frames").is_dir())


def write_dataset(root, sequences) -> Path:
    root = Path(root)
    for name, frames, boxes in sequences:
        write_sequence(root / name, frames, boxes)
    return root


def load_dataset(root) -> list[tuple[str, list[np.ndarray], np.ndarray]]:
    return [(p.name, *read_sequence(p)) for p in list_sequences(root)]


@dataclass(frozen=True)
class PairSamplingConfig:
    template_size: int = 128
    search_size: int = 256
    template_factor: float = 2.0
    search_factor: float = 4.0
    max_frame_gap: int = 100
    shift_jitter: float = 0.25  # max centre offset as a fraction of the search side
    scale_jitter: float = 0.25  # max |log| scale change of the search crop
    brightness_jitter: float = 0.1
    pad_fill: tuple[float, float, float] = (123.675, 116.28, 103.53)


def _has_positive(gt_norm: np.ndarray, grid: int) -> bool:
    centers = (np.arange(grid) + 0.5) / grid
    cols = (centers >= gt_norm[0]) & (centers <= gt_norm[2])
    rows = (centers >= gt_norm[1]) & (centers <= gt_norm[3])
    return bool(cols.any() and rows.any())


def sample_training_pair(frames, boxes, rng: np.random.Generator, cfg: PairSamplingConfig = PairSamplingConfig(),
                         max_tries: int = 100):
    """Draw a (template, search, normalized gt) triple from one annotated source.

    A single-frame source (a still image) supplies both crops. The search crop
    is shifted and rescaled at random; draws whose ground truth covers no
    candidate cell centre are resampled, falling back to an unjittered crop.
    """
    n = len(frames)
    if n == 0 or len(boxes) != n:
        raise DataError("training source needs frames with one box each")
    i = int(rng.integers(n))
    lo, hi = max(0, i - cfg.max_frame_gap), min(n - 1, i + cfg.max_frame_gap)
    j = int(rng.integers(lo, hi + 1))
    template = _augment(warp_crop(frames[i], crop_geometry(boxes[i], cfg.template_factor, cfg.template_size,
                                                          cfg.pad_fill)), rng, cfg.brightness_jitter)
    grid = cfg.search_size // 8
    gt_xyxy = xywh_to_xyxy(boxes[j])
    side = cfg.search_factor * math.sqrt(boxes[j][2] * boxes[j][3])
    geometry = None
    for _ in range(max_tries):
        scale = math.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
        offset = rng.uniform(-cfg.shift_jitter, cfg.shift_jitter, size=2) * side
        candidate = crop_geometry(boxes[j], cfg.search_factor, cfg.search_size, cfg.pad_fill, offset, scale)
        if _has_positive(candidate.encode(gt_xyxy), grid):
            geometry = candidate
            break
    if geometry is None:
        geometry = crop_geometry(boxes[j], cfg.search_factor, cfg.search_size, cfg.pad_fill)
    search = _augment(warp_crop(frames[j], geometry), rng, cfg.brightness_jitter)
    return template, search, geometry.encode(gt_xyxy)


def _augment(patch: np.ndarray, rng: np.random.Generator, brightness: float) -> np.ndarray:
    if brightness <= 0:
        return patch
    gain = rng.uniform(1 - brightness, 1 + brightness, size=3).astype(np.float32)
    return np.clip(patch * gain, 0, 255)


class PairSampler:
    """Seeded batch source over a list of ``(frames, boxes)`` training sources."""

    def __init__(self, sources, cfg: PairSamplingConfig, seed: int = 0):
        if not sources:
            raise DataError("no training sequences")
        self.sources = [(frames, np.asarray(boxes, dtype=np.float64)) for frames, boxes in sources]
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def batch(self, batch_size: int):
        templates, searches, gts = [], [], []
        for _ in range(batch_size):
            frames, boxes = self.sources[int(self.rng.integers(len(self.sources)))]
            t, s, g = sample_training_pair(frames, boxes, self.rng, self.cfg)
            templates.append(t)
            searches.append(s)
            gts.append(g)
        return np.stack(templates), np.stack(searches), np.stack(gts)
