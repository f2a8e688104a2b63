"""Central finite-difference checks of autograd gradients, block by block.

Each block builds a small double-precision instance of one component, reduces
its output to a scalar with a fixed random projection, and compares the
autograd gradient of every parameter and input against central differences.
The loss blocks hold the guidance weights fixed at their unperturbed values,
matching how they enter training.
"""
from __future__ import annotations

from typing import Callable

import torch

from .alignment import DualAlignment
from .attention import ChannelAttention, FeedForward, MultiHeadAttention, SpatialAttention
from .config import RunConfig
from .losses import LossWeights, assign_labels, compute_guidance, cg_reg_loss, pg_cls_loss, total_loss
from .matching import MatcherLayer

DEFAULT_STEP = 1e-4
TOLERANCE = 1e-3


def fd_probe(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], step: float = DEFAULT_STEP,
             max_entries: int | None = 24, seed: int = 0) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """``{name: (autograd, central_difference)}`` on the probed entries of each tensor.

    At most ``max_entries`` entries per tensor are probed, chosen at random.
    """
    names = list(tensors)
    leaves = [tensors[n] for n in names]
    analytic = torch.autograd.grad(fn(), leaves, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    pairs = {}
    with torch.no_grad():
        for name, leaf, grad in zip(names, leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.view(-1)
            n = flat.numel()
            idx = torch.arange(n) if max_entries is None or n <= max_entries else torch.randperm(n, generator=gen)[:max_entries]
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                numeric[j] = (f_plus - f_minus) / (2 * step)
            pairs[name] = (grad.reshape(-1)[idx].double(), numeric)
    return pairs


def relative_error(auto: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """``||auto - numeric|| / max(||auto||, ||numeric||)``."""
    denom = max(auto.norm().item(), numeric.norm().item(), floor)
    return (auto - numeric).norm().item() / denom


def fd_check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], step: float = DEFAULT_STEP,
             max_entries: int | None = 24, seed: int = 0) -> dict[str, float]:
    """Per-tensor norm-wise relative error of autograd against central differences."""
    return {k: relative_error(a, n) for k, (a, n) in fd_probe(fn, tensors, step, max_entries, seed).items()}


def block_error(pairs: dict[str, tuple[torch.Tensor, torch.Tensor]]) -> float:
    """Relative error over the concatenation of every probed entry in a block.

    Per-tensor ratios are not used for the verdict: a tensor whose exact
    gradient vanishes (the key bias of softmax attention, for one) has a ratio
    made of rounding noise.
    """
    auto = torch.cat([a for a, _ in pairs.values()])
    numeric = torch.cat([n for _, n in pairs.values()])
    return relative_error(auto, numeric)


def _projection(like: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(like.shape, generator=gen, dtype=like.dtype)


def _module_case(module: torch.nn.Module, inputs: dict[str, torch.Tensor], call, gen: torch.Generator):
    module.double().eval()
    for p in module.parameters():
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
    inputs = {k: v.double().requires_grad_(True) for k, v in inputs.items()}
    outputs = call(module, inputs)
    outputs = outputs if isinstance(outputs, tuple) else (outputs,)
    weights = [_projection(o, gen) for o in outputs]

    def fn():
        outs = call(module, inputs)
        outs = outs if isinstance(outs, tuple) else (outs,)
        return sum((o * w).sum() for o, w in zip(outs, weights))

    tensors = {f"param:{n}": p for n, p in module.named_parameters()}
    tensors.update({f"input:{n}": v for n, v in inputs.items()})
    return fn, tensors


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def block_channel_attention(gen):
    return _module_case(ChannelAttention(8, 2), {"x": _rand(gen, 2, 8, 3, 3)}, lambda m, i: m(i["x"]), gen)


def block_spatial_attention(gen):
    return _module_case(SpatialAttention(3), {"x": _rand(gen, 2, 4, 5, 5)}, lambda m, i: m(i["x"]), gen)


def block_multi_head_attention(gen):
    inputs = {"q": _rand(gen, 2, 3, 8), "k": _rand(gen, 2, 4, 8), "v": _rand(gen, 2, 4, 8)}
    return _module_case(MultiHeadAttention(8, 2), inputs, lambda m, i: m(i["q"], i["k"], i["v"]), gen)


def block_feed_forward(gen):
    return _module_case(FeedForward(8, 16, dropout=0.0), {"x": _rand(gen, 2, 3, 8)}, lambda m, i: m(i["x"]), gen)


def _matcher_block(gate):
    def block(gen):
        layer = MatcherLayer(8, 2, 16, gate, "post_norm", reduction=2, kernel_size=3, dropout=0.0)
        inputs = {"v_z": _rand(gen, 1, 4, 8), "v_x": _rand(gen, 1, 9, 8)}
        return _module_case(layer, inputs, lambda m, i: m(i["v_z"], i["v_x"]), gen)
    return block


def block_dual_alignment(gen):
    module = DualAlignment(8, 2, reduction=2, kernel_size=3, normalization_mode="post_norm")
    inputs = {"s_c": _rand(gen, 1, 4, 8), "s_p": _rand(gen, 1, 4, 8)}
    return _module_case(module, inputs, lambda m, i: m(i["s_c"], i["s_p"]), gen)


def _loss_inputs(gen):
    logits = _rand(gen, 2, 9, 2).requires_grad_(True)
    gt = torch.tensor([[0.2, 0.25, 0.7, 0.8], [0.1, 0.1, 0.55, 0.6]], dtype=torch.float64)
    # boxes scattered around the ground truth so every positive overlaps it
    boxes = (gt[:, None, :] + 0.08 * _rand(gen, 2, 9, 4)).requires_grad_(True)
    mask = assign_labels(gt, 3)
    return logits, boxes, gt, mask


def block_pg_cls_loss(gen):
    logits, boxes, gt, mask = _loss_inputs(gen)
    frozen = compute_guidance(logits, boxes, gt, mask)["iou_weights"]
    fn = lambda: pg_cls_loss(logits, boxes, gt, mask, LossWeights(), frozen)  # noqa: E731
    return fn, {"input:logits": logits, "input:boxes": boxes}


def block_cg_reg_loss(gen):
    logits, boxes, gt, mask = _loss_inputs(gen)
    frozen = compute_guidance(logits, boxes, gt, mask)["conf_weights"]
    fn = lambda: cg_reg_loss(logits, boxes, gt, mask, LossWeights(), frozen)  # noqa: E731
    return fn, {"input:logits": logits, "input:boxes": boxes}


def toy_config() -> RunConfig:
    """A four-candidate model: 16 px patches, width 8, one matcher per branch."""
    return RunConfig().replace(**{
        "model.d_model": 8, "model.n_heads": 2, "model.ffn_dim": 16, "model.dropout": 0.0, "model.head_hidden": 16,
        "model.channel_reduction": 2, "model.spatial_kernel": 3, "model.template_size": 16, "model.search_size": 16,
        "matcher.depth": 1, "backbone.stage_channels": [4, 4, 4],
    })


def block_full_model(gen):
    from .model import MAPNet

    model = MAPNet(toy_config()).double().eval()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.4)
        # start the box outputs near (0.2, 0.2, 0.8, 0.8) so predicted boxes overlap the ground truth
        model.reg_head.layers[-1].bias.copy_(torch.tensor([-1.4, -1.4, 1.4, 1.4], dtype=torch.float64))
    template = _rand(gen, 1, 3, 16, 16)
    search = _rand(gen, 1, 3, 16, 16)
    gt = torch.tensor([[0.05, 0.05, 0.95, 0.95]], dtype=torch.float64)
    mask = assign_labels(gt, 2)
    with torch.no_grad():
        out = model(template, search)
        guidance = compute_guidance(out["logits"], out["boxes"], gt, mask)

    def fn():
        o = model(template, search)
        return total_loss(o["logits"], o["boxes"], gt, mask, guidance=guidance)["total"]

    return fn, {f"param:{n}": p for n, p in model.named_parameters()}


BLOCKS = {
    "channel_attention": block_channel_attention,
    "spatial_attention": block_spatial_attention,
    "multi_head_attention": block_multi_head_attention,
    "feed_forward": block_feed_forward,
    "matcher_layer_channel": _matcher_block("channel"),
    "matcher_layer_spatial": _matcher_block("spatial"),
    "dual_alignment": block_dual_alignment,
    "pg_cls_loss": block_pg_cls_loss,
    "cg_reg_loss": block_cg_reg_loss,
    "full_model": block_full_model,
}


def run_gradcheck(blocks=None, seed: int = 0, step: float = DEFAULT_STEP, max_entries: int | None = 24) -> dict:
    """Relative error per block, e.g. ``{"channel_attention": 3e-9, ...}``."""
    names = list(BLOCKS) if not blocks else list(blocks)
    results = {}
    for name in names:
        if name not in BLOCKS:
            raise KeyError(f"unknown gradcheck block {name!r}; choose from {sorted(BLOCKS)}")
        gen = torch.Generator().manual_seed(seed)
        fn, tensors = BLOCKS[name](gen)
        results[name] = block_error(fd_probe(fn, tensors, step=step, max_entries=max_entries, seed=seed))
    return results
