import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from conftest import to_t
from mapnet.errors import ContractError, UndefinedLossError
from mapnet.losses import (LossWeights, assign_labels, box_iou, cg_reg_loss, compute_guidance, confidence_guidance,
                           giou_loss, iou_guidance, pg_cls_loss, regression_terms, total_loss)


def test_label_examples():
    assert assign_labels(torch.tensor([0.0, 0.0, 1.0, 1.0]), 32).sum() == 1024
    mask = assign_labels(torch.tensor([0.0, 0.0, 0.5, 0.5]), 32).reshape(32, 32)
    assert mask.sum() == 256 and mask[:16, :16].all()
    thin = torch.tensor([0.1 / 32 + 0.5 / 32 + 0.01, 0.2, 0.5 / 32 + 1 / 32 - 0.01, 0.8])
    assert assign_labels(thin, 32).sum() == 0


def test_labels_match_enumeration(rng):
    for _ in range(20):
        a, b = np.sort(rng.uniform(-0.1, 1.1, size=(2, 2)), axis=0)
        gt = [a[0], a[1], b[0], b[1]]
        np.testing.assert_array_equal(assign_labels(torch.tensor(gt), 8).numpy(), oracles.labels_by_enumeration(gt, 8))


def test_giou_examples():
    g = torch.tensor([0.2, 0.3, 0.6, 0.9], dtype=torch.float64)
    assert giou_loss(g, g).item() == 0
    b = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    assert giou_loss(b, torch.tensor([0.0, 0.0, 0.5, 1.0], dtype=torch.float64)).item() == pytest.approx(0.5, abs=1e-15)
    far = [giou_loss(torch.tensor([0, 0, 1, 1.0]) + s * torch.tensor([1, 0, 1, 0.0]),
                     torch.tensor([0, 0, 1, 1.0])).item() for s in (2, 10, 100)]
    assert far[0] < far[1] < far[2] < 2 and far[2] > 1.98
    with pytest.raises(ContractError):
        giou_loss(b, torch.tensor([0.2, 0.2, 0.2, 0.5], dtype=torch.float64))


def test_giou_matches_oracle(rng):
    for _ in range(50):
        b = np.concatenate([rng.uniform(0, 0.5, 2), rng.uniform(0.5, 1, 2)])
        g = np.concatenate([rng.uniform(0, 0.5, 2), rng.uniform(0.5, 1, 2)])
        assert giou_loss(to_t(b), to_t(g)).item() == pytest.approx(oracles.giou_loss(b, g), abs=1e-12)


def test_inverted_box_has_zero_iou():
    iou, _ = box_iou(torch.tensor([0.6, 0.6, 0.4, 0.4]), torch.tensor([0.3, 0.3, 0.7, 0.7]))
    assert iou.item() == 0


def _fixture_pg():
    gt = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    boxes = torch.tensor([[0.0, 0.0, 0.5, 1.0], [0.0, 0.0, 1.0, 1.0], [0.1, 0.1, 0.2, 0.2], [0.3, 0.3, 0.4, 0.4]],
                         dtype=torch.float64)
    logits = torch.tensor([[1.0, -0.5], [0.2, 0.3], [-1.0, 2.0], [0.5, 0.1]], dtype=torch.float64)
    mask = torch.tensor([True, True, False, False])
    return logits, boxes, gt, mask


def test_pg_guidance_weights_two_thirds_four_thirds():
    logits, boxes, gt, mask = _fixture_pg()
    w = iou_guidance(boxes[None], gt[None], mask[None])[0]
    torch.testing.assert_close(w, torch.tensor([2 / 3, 4 / 3, 0, 0], dtype=torch.float64), rtol=0, atol=1e-15)


def test_pg_cls_loss_matches_scripted_oracle():
    logits, boxes, gt, mask = _fixture_pg()
    got = pg_cls_loss(logits, boxes, gt[None], mask).item()
    ref = oracles.pg_cls_loss(logits.tolist(), boxes.tolist(), gt.tolist(), mask.tolist(), 0.0625)
    assert got == pytest.approx(ref, abs=1e-10)
    # by hand: (2/3 CE0 + 4/3 CE1 + beta (CE2 + CE3)) / (2 + 2 beta)
    lp = F.log_softmax(logits, -1)
    hand = (-(2 / 3) * lp[0, 0] - (4 / 3) * lp[1, 0] - 0.0625 * (lp[2, 1] + lp[3, 1])) / (2 + 2 * 0.0625)
    assert got == pytest.approx(hand.item(), abs=1e-12)


def test_pg_cls_loss_matches_oracle_on_random_batch(rng):
    for _ in range(10):
        gt = np.array([0.2, 0.25, 0.7, 0.8])
        labels = oracles.labels_by_enumeration(gt, 4)
        logits = rng.normal(size=(16, 2))
        boxes = np.clip(gt + 0.1 * rng.normal(size=(16, 4)), 0, 1)
        got = pg_cls_loss(to_t(logits), to_t(boxes), to_t(gt[None]), torch.tensor(labels)).item()
        assert got == pytest.approx(oracles.pg_cls_loss(logits, boxes, gt, labels, 0.0625), abs=1e-10)


def test_pg_reduces_to_balanced_ce_with_equal_ious():
    gt = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    boxes = torch.tensor([[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.5]], dtype=torch.float64)
    logits = torch.tensor([[0.3, 0.1], [2.0, -1.0], [0.0, 1.0]], dtype=torch.float64)
    mask = torch.tensor([True, True, False])
    lp = F.log_softmax(logits, -1)
    ce = (-(lp[0, 0] + lp[1, 0]) - 0.0625 * lp[2, 1]) / (2 + 0.0625)
    assert pg_cls_loss(logits, boxes, gt, mask).item() == pytest.approx(ce.item(), abs=1e-10)


def test_perfect_classification_has_zero_loss():
    logits, boxes, gt, mask = _fixture_pg()
    perfect = torch.where(mask[:, None], torch.tensor([60.0, -60.0]), torch.tensor([-60.0, 60.0])).double()
    assert pg_cls_loss(perfect, boxes, gt[None], mask).item() < 1e-20


def test_cg_examples():
    gt = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    boxes = torch.tensor([[0.0, 0.0, 0.5, 1.0], [0.3, 0.3, 0.4, 0.4]], dtype=torch.float64)
    logits = torch.tensor([[0.4, 0.2], [1.0, 1.0]], dtype=torch.float64)
    mask = torch.tensor([True, False])
    assert cg_reg_loss(logits, boxes, gt, mask).item() == pytest.approx(3.5, abs=1e-12)
    exact = gt.expand(2, 4).clone()
    assert cg_reg_loss(logits, exact, gt, torch.tensor([True, True])).item() == 0


def test_cg_matches_oracle(rng):
    for _ in range(10):
        gt = np.array([0.1, 0.2, 0.6, 0.7])
        labels = oracles.labels_by_enumeration(gt, 4)
        logits = rng.normal(size=(16, 2))
        boxes = np.clip(gt + 0.1 * rng.normal(size=(16, 4)), 0, 1)
        got = cg_reg_loss(to_t(logits), to_t(boxes), to_t(gt[None]), torch.tensor(labels)).item()
        assert got == pytest.approx(oracles.cg_reg_loss(logits, boxes, gt, labels, 2.0, 5.0), abs=1e-10)


def test_cg_uniform_confidence_is_plain_combination(rng):
    gt = torch.tensor([[0.1, 0.2, 0.6, 0.7]], dtype=torch.float64)
    boxes = to_t(np.clip(np.array([0.1, 0.2, 0.6, 0.7]) + 0.1 * rng.normal(size=(5, 4)), 0, 1))
    logits = torch.tensor([[0.7, -0.2]] * 5, dtype=torch.float64)
    mask = torch.tensor([True, True, True, False, True])
    plain = regression_terms(boxes, gt[0])[mask].mean()
    assert cg_reg_loss(logits, boxes, gt, mask).item() == pytest.approx(plain.item(), abs=1e-10)


def test_degenerate_reduction_equals_baseline_pair(rng):
    # equal IoUs on positives and equal confidences -> Combination #1 (plain CE + GIoU/L1)
    gt = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    boxes = torch.tensor([[[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0], [0.0, 0.5, 1.0, 1.0], [0.2, 0.2, 0.3, 0.9]]],
                         dtype=torch.float64)
    logits = torch.tensor([[[0.7, -0.2], [0.7, -0.2], [0.7, -0.2], [-1.0, 0.4]]], dtype=torch.float64)
    mask = torch.tensor([[True, True, True, False]])
    guided = total_loss(logits, boxes, gt, mask)
    plain = total_loss(logits, boxes, gt, mask, cls_mode="ce", reg_mode="plain")
    assert guided["cls"].item() == pytest.approx(plain["cls"].item(), abs=1e-10)
    assert guided["reg"].item() == pytest.approx(plain["reg"].item(), abs=1e-10)


def test_guidance_weight_means_are_one(rng):
    gt = to_t(rng.uniform(0.1, 0.3, size=(3, 2)))
    gt = torch.cat([gt, gt + 0.5], dim=1)
    boxes = (gt[:, None, :] + 0.1 * to_t(rng.normal(size=(3, 16, 4)))).clamp(0, 1)
    logits = to_t(rng.normal(size=(3, 16, 2)))
    mask = assign_labels(gt, 4)
    for w in (iou_guidance(boxes, gt, mask), confidence_guidance(logits, mask)):
        means = w.sum(-1) / mask.sum(-1)
        torch.testing.assert_close(means, torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-12)


def test_guidance_monotonicity():
    gt = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    mask = torch.tensor([[True, True, True]])
    boxes = torch.tensor([[[0.0, 0.0, 0.5, 1.0], [0.0, 0.0, 0.6, 1.0], [0.0, 0.0, 0.7, 1.0]]], dtype=torch.float64)
    better = boxes.clone()
    better[0, 0, 2] = 0.55
    assert iou_guidance(better, gt, mask)[0, 0] > iou_guidance(boxes, gt, mask)[0, 0]
    logits = torch.zeros(1, 3, 2, dtype=torch.float64)
    bolder = logits.clone()
    bolder[0, 1, 0] = 0.5
    assert confidence_guidance(bolder, mask)[0, 1] > confidence_guidance(logits, mask)[0, 1]


def test_losses_non_negative(rng):
    for _ in range(10):
        gt = torch.tensor([[0.2, 0.2, 0.7, 0.8]], dtype=torch.float64)
        out = total_loss(to_t(rng.normal(size=(1, 16, 2))), to_t(rng.uniform(size=(1, 16, 4))), gt)
        assert out["cls"] >= 0 and out["reg"] >= 0


def test_total_is_sum():
    logits, boxes, gt, mask = _fixture_pg()
    out = total_loss(logits[None], boxes[None], gt[None], mask[None])
    assert out["total"].item() == out["cls"].item() + out["reg"].item()


def test_guidance_is_detached():
    logits, boxes, gt, mask = _fixture_pg()
    boxes = boxes.clone().requires_grad_(True)
    g = compute_guidance(logits, boxes, gt[None], mask)
    assert not g["iou_weights"].requires_grad and not g["conf_weights"].requires_grad


def test_sample_without_positives_is_skipped(caplog):
    logits, boxes, gt, mask = _fixture_pg()
    batch = (torch.stack([logits, logits]), torch.stack([boxes, boxes]), torch.stack([gt, gt]),
             torch.stack([mask, torch.zeros(4, dtype=torch.bool)]))
    with caplog.at_level(logging.WARNING):
        both = pg_cls_loss(*batch).item()
    assert "skipping 1 sample" in caplog.text
    assert both == pytest.approx(pg_cls_loss(logits, boxes, gt[None], mask).item(), abs=1e-15)
    with pytest.raises(UndefinedLossError):
        pg_cls_loss(logits, boxes, gt[None], torch.zeros(4, dtype=torch.bool))


def test_head_gradient_matches_finite_differences():
    from mapnet.gradcheck import run_gradcheck

    assert run_gradcheck(["pg_cls_loss", "cg_reg_loss"])["pg_cls_loss"] < 1e-3


def test_weights_defaults():
    w = LossWeights()
    assert (w.beta, w.lambda_giou, w.lambda_l1) == (0.0625, 2.0, 5.0)
