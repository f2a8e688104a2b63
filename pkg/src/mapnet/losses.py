"""Label assignment, IoU/GIoU and the cross-guided training losses.

The classification loss weights each positive's cross-entropy by how well its
own box regresses (IoU over the mean positive IoU); the regression loss weights
each positive's GIoU + L1 term by its foreground confidence over the mean
positive confidence. Both sets of weights are treated as constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, UndefinedLossError

log = logging.getLogger(__name__)

CLS_MODES = ("pg", "ce")
REG_MODES = ("cg", "plain")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.0625
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        for name in ("beta", "lambda_giou", "lambda_l1"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"loss weight {name} must be positive")


def _area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def box_iou(b: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Element-wise IoU and union area of corner boxes; inverted boxes have zero area."""
    lt = torch.maximum(b[..., :2], g[..., :2])
    rb = torch.minimum(b[..., 2:], g[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(dim=-1)
    union = _area(b) + _area(g) - inter
    return inter / union.clamp(min=1e-12), union


def generalized_iou(b: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    iou, union = box_iou(b, g)
    lt = torch.minimum(b[..., :2], g[..., :2])
    rb = torch.maximum(b[..., 2:], g[..., 2:])
    enclosure = (rb - lt).clamp(min=0).prod(dim=-1)
    return iou - (enclosure - union) / enclosure.clamp(min=1e-12)


def giou_loss(b: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """``1 - GIoU``, in [0, 2]. Ground truth boxes must have positive area."""
    if torch.any(_area(g) <= 0):
        raise ContractError("ground-truth box has zero area")
    return 1.0 - generalized_iou(b, g)


def assign_labels(gt: torch.Tensor, grid_size: int) -> torch.Tensor:
    """Positive mask over a ``grid_size x grid_size`` lattice of candidates.

    Candidate ``row * grid_size + col`` is positive when its cell centre
    ``((col + 0.5) / G, (row + 0.5) / G)`` lies inside the normalized ``gt`` box
    (boundaries inclusive). Accepts ``(4,)`` or ``(B, 4)`` boxes.
    """
    gt = torch.as_tensor(gt, dtype=torch.float64)
    centers = (torch.arange(grid_size, dtype=torch.float64) + 0.5) / grid_size
    cy, cx = torch.meshgrid(centers, centers, indexing="ij")
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    g = gt[..., None, :]
    return (cx >= g[..., 0]) & (cx <= g[..., 2]) & (cy >= g[..., 1]) & (cy <= g[..., 3])


def _valid_samples(mask: torch.Tensor) -> torch.Tensor:
    n_pos = mask.sum(dim=-1)
    valid = n_pos > 0
    if not torch.all(valid):
        skipped = int((~valid).sum())
        if not torch.any(valid):
            raise UndefinedLossError("no positive candidates in any sample; loss is undefined")
        log.warning("skipping %d sample(s) without positive candidates", skipped)
    return valid


def _normalized_weights(values: torch.Tensor, mask: torch.Tensor, what: str) -> torch.Tensor:
    values = values.detach()
    maskf = mask.to(values.dtype)
    n_pos = maskf.sum(dim=-1, keepdim=True).clamp(min=1)
    mean = (values * maskf).sum(dim=-1, keepdim=True) / n_pos
    degenerate = mean <= 0
    if torch.any(degenerate & (mask.sum(dim=-1, keepdim=True) > 0)):
        log.warning("mean positive %s is zero; falling back to unit weights", what)
    weights = torch.where(degenerate, torch.ones_like(values), values / mean.clamp(min=1e-12))
    return weights * maskf


def iou_guidance(boxes: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """IoU of each positive's box over the mean positive IoU; zero on negatives."""
    iou, _ = box_iou(boxes.detach(), gt[..., None, :].to(boxes.dtype))
    return _normalized_weights(iou, mask, "IoU")


def confidence_guidance(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Foreground probability of each positive over the positive mean; zero on negatives."""
    return _normalized_weights(logits.detach().softmax(dim=-1)[..., 0], mask, "confidence")


def pg_cls_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
                weights: LossWeights = LossWeights(), iou_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Precision-guided classification loss averaged over samples with positives.

    ``logits`` ``(B, n, 2)`` with index 0 = foreground, ``boxes`` ``(B, n, 4)``
    normalized corners, ``gt`` ``(B, 4)``, ``mask`` ``(B, n)`` positives.
    """
    logits, boxes, gt, mask = _batched(logits, boxes, gt, mask)
    valid = _valid_samples(mask)
    if iou_weights is None:
        iou_weights = iou_guidance(boxes, gt, mask)
    log_p = F.log_softmax(logits, dim=-1)
    maskf = mask.to(logits.dtype)
    pos = (iou_weights * -log_p[..., 0] * maskf).sum(dim=-1)
    neg = (-log_p[..., 1] * (1 - maskf)).sum(dim=-1)
    n_pos, n_neg = maskf.sum(dim=-1), (1 - maskf).sum(dim=-1)
    per_sample = (pos + weights.beta * neg) / (n_pos + weights.beta * n_neg)
    return per_sample[valid].mean()


def regression_terms(boxes: torch.Tensor, gt: torch.Tensor, weights: LossWeights = LossWeights()):
    """Per-candidate ``(lambda_giou * L_giou + lambda_l1 * L1)`` against ``gt``."""
    g = gt[..., None, :].to(boxes.dtype).expand_as(boxes)
    l_giou = 1.0 - generalized_iou(boxes, g)
    l1 = (boxes - g).abs().sum(dim=-1)
    return weights.lambda_giou * l_giou + weights.lambda_l1 * l1


def cg_reg_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
                weights: LossWeights = LossWeights(), conf_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Confidence-guided regression loss averaged over samples with positives."""
    logits, boxes, gt, mask = _batched(logits, boxes, gt, mask)
    valid = _valid_samples(mask)
    if conf_weights is None:
        conf_weights = confidence_guidance(logits, mask)
    maskf = mask.to(boxes.dtype)
    terms = regression_terms(boxes, gt, weights)
    per_sample = (conf_weights * terms * maskf).sum(dim=-1) / maskf.sum(dim=-1).clamp(min=1)
    return per_sample[valid].mean()


def _batched(logits, boxes, gt, mask):
    if logits.dim() == 2:
        logits, boxes, gt, mask = logits[None], boxes[None], gt.reshape(1, 4), mask[None]
    if logits.shape[:2] != boxes.shape[:2] or logits.shape[:2] != mask.shape or gt.shape[0] != logits.shape[0]:
        raise ContractError("logits, boxes, gt and mask disagree in batch or candidate count")
    return logits, boxes, gt.to(boxes.dtype), mask.bool()


def compute_guidance(logits, boxes, gt, mask, cls_mode: str = "pg", reg_mode: str = "cg") -> dict:
    """Guidance weights for both losses, honouring the baseline switches."""
    logits, boxes, gt, mask = _batched(logits, boxes, gt, mask)
    ones = mask.to(boxes.dtype)
    return {
        "iou_weights": iou_guidance(boxes, gt, mask) if cls_mode == "pg" else ones,
        "conf_weights": confidence_guidance(logits, mask) if reg_mode == "cg" else ones,
    }


def total_loss(logits: torch.Tensor, boxes: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None,
               weights: LossWeights = LossWeights(), cls_mode: str = "pg", reg_mode: str = "cg",
               guidance: dict | None = None) -> dict:
    """Unit-weighted sum of the classification and regression losses.

    ``cls_mode="ce"`` / ``reg_mode="plain"`` replace the guidance weights with ones,
    giving the beta-balanced cross-entropy and plain GIoU + L1 baselines.
    ``guidance`` may carry precomputed weights (used to freeze them under
    finite differencing).
    """
    if cls_mode not in CLS_MODES or reg_mode not in REG_MODES:
        raise ConfigurationError(f"unknown loss modes {cls_mode!r}/{reg_mode!r}")
    if mask is None:
        side = int(round(logits.shape[-2] ** 0.5))
        mask = assign_labels(gt.detach().double().cpu(), side).to(logits.device)
    if guidance is None:
        guidance = compute_guidance(logits, boxes, gt, mask, cls_mode, reg_mode)
    cls = pg_cls_loss(logits, boxes, gt, mask, weights, guidance["iou_weights"])
    reg = cg_reg_loss(logits, boxes, gt, mask, weights, guidance["conf_weights"])
    return {"total": cls + reg, "cls": cls, "reg": reg}
