"""Template/search matchers built from the attention primitives.

A matcher layer runs one self-attention per stream, gates both, lets the search
stream query the template with a cross-attention, gates again and finishes each
stream with a feed-forward block. The gate kind decides the flavour:

* ``"channel"`` - category-aware matcher (classification branch),
* ``"spatial"`` - spatial-aware matcher (regression branch),
* ``"none"``    - the ungated base matcher used for ablations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention, apply_gate, make_gate, positional_encoding, square_side
from .errors import ConfigurationError, ContractError

GATE_KINDS = ("channel", "spatial", "none")
NORMALIZATION_MODES = ("literal", "post_norm")


@dataclass(frozen=True)
class MatcherStackConfig:
    depth: int = 3
    gate_kind: str = "channel"
    normalization_mode: str = "post_norm"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"matcher depth must be >= 1, got {self.depth}")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigurationError(f"unknown gate kind {self.gate_kind!r}")
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ConfigurationError(f"unknown normalization mode {self.normalization_mode!r}")


def grid_encoding(tokens: torch.Tensor) -> torch.Tensor:
    """Positional encoding for a square token grid, broadcastable over the batch."""
    side = square_side(tokens.shape[1])
    return positional_encoding(side, side, tokens.shape[2], dtype=tokens.dtype, device=tokens.device)


def _norm(mode: str, d_model: int) -> nn.Module:
    return nn.LayerNorm(d_model) if mode == "post_norm" else nn.Identity()


class MatcherLayer(nn.Module):
    def __init__(self, d_model: int = 256, n_heads: int = 8, d_ff: int = 1024, gate_kind: str = "channel",
                 normalization_mode: str = "post_norm", reduction: int = 16, kernel_size: int = 7,
                 dropout: float = 0.1):
        super().__init__()
        if gate_kind not in GATE_KINDS:
            raise ConfigurationError(f"unknown gate kind {gate_kind!r}")
        if normalization_mode not in NORMALIZATION_MODES:
            raise ConfigurationError(f"unknown normalization mode {normalization_mode!r}")
        self.d_model = d_model
        self.gate_kind = gate_kind
        self.normalization_mode = normalization_mode

        self.self_attn_z = MultiHeadAttention(d_model, n_heads)
        self.self_attn_x = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.gate_z = make_gate(gate_kind, d_model, reduction, kernel_size)
        self.gate_x = make_gate(gate_kind, d_model, reduction, kernel_size)
        self.gate_cross = make_gate(gate_kind, d_model, reduction, kernel_size)
        self.ffn_z = FeedForward(d_model, d_ff, dropout)
        self.ffn_x = FeedForward(d_model, d_ff, dropout)
        self.norm_z1 = _norm(normalization_mode, d_model)
        self.norm_x1 = _norm(normalization_mode, d_model)
        self.norm_x2 = _norm(normalization_mode, d_model)
        self.norm_z3 = _norm(normalization_mode, d_model)
        self.norm_x3 = _norm(normalization_mode, d_model)

    def forward(self, v_z: torch.Tensor, v_x: torch.Tensor,
                pos_z: torch.Tensor | None = None, pos_x: torch.Tensor | None = None):
        if v_z.shape[-1] != self.d_model or v_x.shape[-1] != self.d_model:
            raise ContractError(f"matcher width is {self.d_model}, got {v_z.shape[-1]} and {v_x.shape[-1]}")
        if pos_z is None:
            pos_z = grid_encoding(v_z)
        if pos_x is None:
            pos_x = grid_encoding(v_x)

        qk_z = v_z + pos_z
        v_z1 = apply_gate(self.gate_z, self.norm_z1(v_z + self.self_attn_z(qk_z, qk_z, v_z)))
        qk_x = v_x + pos_x
        v_x1 = apply_gate(self.gate_x, self.norm_x1(v_x + self.self_attn_x(qk_x, qk_x, v_x)))

        cross = self.cross_attn(v_x1 + pos_x, v_z1 + pos_z, v_z1)
        v_x2 = apply_gate(self.gate_cross, self.norm_x2(v_x1 + cross))

        return self.norm_z3(self.ffn_z(v_z1)), self.norm_x3(self.ffn_x(v_x2))


def run_matcher_stack(v_z: torch.Tensor, v_x: torch.Tensor, cfg: MatcherStackConfig,
                      layers: Sequence[MatcherLayer]) -> torch.Tensor:
    """Thread both streams through ``layers`` and return the final search stream."""
    if len(layers) != cfg.depth:
        raise ConfigurationError(f"stack depth {cfg.depth} but {len(layers)} layers supplied")
    pos_z = grid_encoding(v_z)
    pos_x = grid_encoding(v_x)
    for layer in layers:
        v_z, v_x = layer(v_z, v_x, pos_z, pos_x)
    return v_x


class MatcherStack(nn.Module):
    """``depth`` matcher layers of one gate kind; output is the raw similarity tokens."""

    def __init__(self, cfg: MatcherStackConfig, d_model: int = 256, n_heads: int = 8, d_ff: int = 1024,
                 reduction: int = 16, kernel_size: int = 7, dropout: float = 0.1):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            MatcherLayer(d_model, n_heads, d_ff, cfg.gate_kind, cfg.normalization_mode, reduction, kernel_size, dropout)
            for _ in range(cfg.depth)
        )

    def forward(self, v_z: torch.Tensor, v_x: torch.Tensor) -> torch.Tensor:
        return run_matcher_stack(v_z, v_x, self.cfg, self.layers)
