"""Dual alignment of classification and regression similarity tokens."""
from __future__ import annotations

import torch
from torch import nn

from .attention import ChannelAttention, MultiHeadAttention, SpatialAttention, apply_gate
from .errors import ContractError
from .matching import _norm, grid_encoding


class DualAlignment(nn.Module):
    """Two cascaded cross-attentions that condition each branch on the other.

    Stage one updates the classification tokens against the row-concatenation of
    both branches and applies a channel gate. Stage two updates the regression
    tokens against the concatenation of the *updated* classification tokens and
    the original regression tokens, then applies a spatial gate.
    """

    def __init__(self, d_model: int = 256, n_heads: int = 8, reduction: int = 16, kernel_size: int = 7,
                 normalization_mode: str = "post_norm"):
        super().__init__()
        self.d_model = d_model
        self.cross_attn_c = MultiHeadAttention(d_model, n_heads)
        self.cross_attn_p = MultiHeadAttention(d_model, n_heads)
        self.gate_c = ChannelAttention(d_model, reduction)
        self.gate_p = SpatialAttention(kernel_size)
        self.norm_c = _norm(normalization_mode, d_model)
        self.norm_p = _norm(normalization_mode, d_model)

    def forward(self, s_c: torch.Tensor, s_p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if s_c.shape != s_p.shape:
            raise ContractError(f"similarity tokens disagree in shape: {tuple(s_c.shape)} vs {tuple(s_p.shape)}")
        if s_c.shape[-1] != self.d_model:
            raise ContractError(f"alignment width is {self.d_model}, got {s_c.shape[-1]}")
        pos = grid_encoding(s_c)
        pos_m = torch.cat([pos, pos], dim=0)

        s_m = torch.cat([s_c, s_p], dim=1)
        s_c_new = apply_gate(self.gate_c, self.norm_c(s_c + self.cross_attn_c(s_c + pos, s_m + pos_m, s_m)))

        s_m2 = torch.cat([s_c_new, s_p], dim=1)
        s_p_new = apply_gate(self.gate_p, self.norm_p(s_p + self.cross_attn_p(s_p + pos, s_m2 + pos_m, s_m2)))
        return s_c_new, s_p_new


def dual_align(s_c: torch.Tensor, s_p: torch.Tensor, module: DualAlignment) -> tuple[torch.Tensor, torch.Tensor]:
    return module(s_c, s_p)
