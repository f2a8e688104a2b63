"""One-pass evaluation (OPE) and tracking metrics.

Conventions, fixed here because benchmarks differ at the endpoints:

* success curve: fraction of frames with IoU **>** t, t in {0, 0.05, ..., 1};
  SR (success AUC) is the mean of the 21 curve values;
* PR: fraction of frames with centre error **<=** 20 px;
* NPR: mean over t in {0, 0.005, ..., 0.5} of the fraction with normalized
  centre error <= t, where the offset is divided per axis by the gt width/height;
* AO: mean IoU; SR@tau: fraction of frames with IoU > tau.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import list_sequences, read_sequence
from .errors import ContractError, DataError
from .tracker import format_results

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 101)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
PRECISION_PIXELS = 20.0


def frame_metrics(pred_xywh, gt_xywh):
    """Per-frame ``(iou, centre_error_px, normalized_centre_error)`` arrays.

    Frames whose ground truth has no area yield NaN in all three outputs.
    """
    p = np.atleast_2d(np.asarray(pred_xywh, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gt_xywh, dtype=np.float64))
    if p.shape != g.shape or p.shape[-1] != 4:
        raise ContractError(f"prediction {p.shape} and ground truth {g.shape} must both be (T, 4)")
    pw, ph = np.maximum(p[:, 2], 0), np.maximum(p[:, 3], 0)
    gw, gh = g[:, 2], g[:, 3]
    iw = np.clip(np.minimum(p[:, 0] + pw, g[:, 0] + gw) - np.maximum(p[:, 0], g[:, 0]), 0, None)
    ih = np.clip(np.minimum(p[:, 1] + ph, g[:, 1] + gh) - np.maximum(p[:, 1], g[:, 1]), 0, None)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    valid = (gw > 0) & (gh > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(valid, inter / np.where(union > 0, union, 1.0), np.nan)
        dx = (p[:, 0] + pw / 2) - (g[:, 0] + gw / 2)
        dy = (p[:, 1] + ph / 2) - (g[:, 1] + gh / 2)
        err = np.where(valid, np.hypot(dx, dy), np.nan)
        nerr = np.where(valid, np.hypot(dx / np.where(valid, gw, 1), dy / np.where(valid, gh, 1)), np.nan)
    if not valid.all():
        log.warning("excluding %d frame(s) with zero-area ground truth", int((~valid).sum()))
    return iou, err, nerr


def _nonempty(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        raise ContractError(f"{what} needs at least one frame")
    return arr


def success_curve(ious) -> np.ndarray:
    ious = _nonempty(ious, "success curve")
    return (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def success_auc(ious) -> float:
    return float(success_curve(ious).mean())


def precision_curve(errors_px, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    errors = _nonempty(errors_px, "precision")
    return (errors[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def precision_at(errors_px, threshold: float = PRECISION_PIXELS) -> float:
    return float(precision_curve(errors_px, [threshold])[0])


def norm_precision_curve(normalized_errors) -> np.ndarray:
    return precision_curve(normalized_errors, NORM_PRECISION_THRESHOLDS)


def norm_precision_auc(normalized_errors) -> float:
    return float(norm_precision_curve(normalized_errors).mean())


def ao_sr(ious) -> tuple[float, float, float]:
    ious = _nonempty(ious, "AO/SR")
    return float(ious.mean()), float((ious > 0.5).mean()), float((ious > 0.75).mean())


@dataclass
class SequenceMetrics:
    name: str
    frames: int
    success: float
    precision: float
    norm_precision: float
    ao: float
    sr50: float
    sr75: float


def summarize(name: str, iou, err, nerr) -> SequenceMetrics:
    ao, sr50, sr75 = ao_sr(iou)
    return SequenceMetrics(name, int(np.sum(~np.isnan(iou))), success_auc(iou), precision_at(err),
                           norm_precision_auc(nerr), ao, sr50, sr75)


@dataclass
class EvalReport:
    sequences: list[SequenceMetrics]
    overall: SequenceMetrics
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"overall": asdict(self.overall), "sequences": [asdict(s) for s in self.sequences],
                "curves": {k: [float(v) for v in vals] for k, vals in self.curves.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls([SequenceMetrics(**s) for s in data["sequences"]], SequenceMetrics(**data["overall"]),
                   {k: list(v) for k, v in data.get("curves", {}).items()})

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(per_sequence: list[tuple[str, np.ndarray, np.ndarray]]) -> EvalReport:
    """Aggregate ``(name, predicted_xywh, gt_xywh)`` triples into a report.

    Overall metrics are computed on the concatenation of all frames, so they are
    frame-weighted means of the per-sequence values.
    """
    if not per_sequence:
        raise ContractError("no sequences to report on")
    rows, all_iou, all_err, all_nerr = [], [], [], []
    for name, pred, gt in per_sequence:
        iou, err, nerr = frame_metrics(pred, gt)
        rows.append(summarize(name, iou, err, nerr))
        all_iou.append(iou)
        all_err.append(err)
        all_nerr.append(nerr)
    iou, err, nerr = (np.concatenate(a) for a in (all_iou, all_err, all_nerr))
    overall = summarize("overall", iou, err, nerr)
    curves = {"success": success_curve(iou), "precision": precision_curve(err),
              "norm_precision": norm_precision_curve(nerr)}
    return EvalReport(rows, overall, curves)


def run_ope(tracker, dataset_root, out_dir=None) -> EvalReport:
    """Initialize on frame one's ground truth and track to the end without resets.

    ``tracker`` needs ``initialize(frame, box_xywh)`` and ``update(frame) -> (box_xywh, score)``.
    Raw ``x,y,w,h,score`` files are written under ``out_dir/results`` when given.
    """
    results = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for seq_dir in list_sequences(dataset_root):
        try:
            frames, gt = read_sequence(seq_dir)
        except DataError as exc:
            log.warning("skipping %s: %s", seq_dir.name, exc)
            continue
        tracker.initialize(frames[0], gt[0])
        boxes, scores = [np.asarray(gt[0], dtype=np.float64)], [1.0]
        for frame in frames[1:]:
            box, score = tracker.update(frame)
            boxes.append(np.asarray(box, dtype=np.float64))
            scores.append(float(score))
        boxes = np.stack(boxes)
        if out_dir is not None:
            (out_dir / "results").mkdir(parents=True, exist_ok=True)
            (out_dir / "results" / f"{seq_dir.name}.txt").write_text(format_results(boxes, scores))
        results.append((seq_dir.name, boxes, gt))
    if not results:
        raise DataError(f"no usable sequences under {dataset_root}")
    report = build_report(results)
    if out_dir is not None:
        (out_dir / "report.json").write_text(report.to_json())
    return report


def curve_tables(report: EvalReport) -> dict[str, str]:
    tables = {}
    grids = {"success": ("iou_threshold", SUCCESS_THRESHOLDS), "precision": ("error_px", PRECISION_THRESHOLDS),
             "norm_precision": ("normalized_error", NORM_PRECISION_THRESHOLDS)}
    for key, (label, thresholds) in grids.items():
        values = report.curves.get(key)
        if values is None:
            continue
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([label, "rate"])
        for t, v in zip(thresholds, values):
            writer.writerow([f"{t:.4f}", f"{float(v):.6f}"])
        tables[key] = buf.getvalue()
    return tables


def emit_plots(report: EvalReport, out_dir) -> list[Path]:
    """Write success / precision / normalized-precision SVG plots and CSV curve tables."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, text in curve_tables(report).items():
        path = out_dir / f"{key}_curve.csv"
        path.write_text(text)
        written.append(path)

    o = report.overall
    specs = [
        ("success", SUCCESS_THRESHOLDS, "Overlap threshold", "Success rate", f"Success plot (AUC {o.success:.3f})"),
        ("precision", PRECISION_THRESHOLDS, "Location error threshold (px)", "Precision",
         f"Precision plot (@20px {o.precision:.3f})"),
        ("norm_precision", NORM_PRECISION_THRESHOLDS, "Normalized location error threshold", "Precision",
         f"Normalized precision plot (AUC {o.norm_precision:.3f})"),
    ]
    with matplotlib.rc_context({"svg.hashsalt": "mapnet", "svg.fonttype": "none"}):
        for key, thresholds, xlabel, ylabel, title in specs:
            if key not in report.curves:
                continue
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.plot(thresholds, report.curves[key], color="tab:red", linewidth=2, label="MAPNet")
            ax.set(xlabel=xlabel, ylabel=ylabel, title=title, ylim=(0, 1.02), xlim=(thresholds[0], thresholds[-1]))
            ax.grid(True, linestyle=":")
            ax.legend(loc="lower left" if key == "success" else "lower right")
            path = out_dir / f"{key}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
