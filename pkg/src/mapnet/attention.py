"""Attention building blocks: channel / spatial gating, multi-head attention,
2-D sinusoidal position encoding and the residual feed-forward block.

Tensor layout conventions used throughout the package:

* token sequences are ``(B, n, d)``;
* feature grids are ``(B, C, H, W)`` (channels first, as torch convolutions expect).
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractError

__all__ = [
    "ChannelAttention",
    "SpatialAttention",
    "MultiHeadAttention",
    "FeedForward",
    "positional_encoding",
    "flatten_features",
    "unflatten_tokens",
    "square_side",
    "make_gate",
]


def square_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"token count {n} is not a perfect square; cannot unflatten to a grid")
    return side


def flatten_features(grid: torch.Tensor) -> torch.Tensor:
    """Row-major flatten of a ``(B, C, H, W)`` grid into ``(B, H*W, C)`` tokens."""
    if grid.dim() != 4:
        raise ContractError(f"expected a (B, C, H, W) grid, got shape {tuple(grid.shape)}")
    return grid.flatten(2).transpose(1, 2)


def unflatten_tokens(tokens: torch.Tensor, grid_shape: tuple[int, int] | None = None) -> torch.Tensor:
    """Inverse of :func:`flatten_features`. Square grids are inferred when no shape is given."""
    if tokens.dim() != 3:
        raise ContractError(f"expected (B, n, d) tokens, got shape {tuple(tokens.shape)}")
    b, n, d = tokens.shape
    if grid_shape is None:
        side = square_side(n)
        grid_shape = (side, side)
    h, w = grid_shape
    if h * w != n:
        raise ContractError(f"grid {h}x{w} does not hold {n} tokens")
    return tokens.transpose(1, 2).reshape(b, d, h, w)


class ChannelAttention(nn.Module):
    """Channel gate: ``x * sigmoid(MLP(maxpool(x)) + MLP(avgpool(x)))``.

    The MLP is shared between the two pooled descriptors and has no biases.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if reduction < 1 or channels % reduction != 0:
            raise ConfigurationError(f"reduction ratio {reduction} must divide channel count {channels}")
        self.channels = channels
        self.reduction = reduction
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def mlp(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(pooled)))

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ContractError(f"channel attention built for {self.channels} channels, got shape {tuple(x.shape)}")
        logits = self.mlp(x.amax(dim=(2, 3))) + self.mlp(x.mean(dim=(2, 3)))
        return torch.sigmoid(logits)[:, :, None, None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """Spatial gate: ``x * sigmoid(Conv(maxpool_c(x)) + Conv(avgpool_c(x)))``.

    One convolution is applied separately to each pooled map and the responses
    are summed, so its bias enters the pre-activation twice.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"spatial attention kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(1, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ContractError(f"expected a (B, C, H, W) grid, got shape {tuple(x.shape)}")
        max_map = x.amax(dim=1, keepdim=True)
        avg_map = x.mean(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(max_map) + self.conv(avg_map))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


def make_gate(kind: str, channels: int, reduction: int = 16, kernel_size: int = 7) -> nn.Module:
    if kind == "channel":
        return ChannelAttention(channels, reduction)
    if kind == "spatial":
        return SpatialAttention(kernel_size)
    if kind == "none":
        return nn.Identity()
    raise ConfigurationError(f"unknown gate kind {kind!r}; expected 'channel', 'spatial' or 'none'")


def apply_gate(gate: nn.Module, tokens: torch.Tensor) -> torch.Tensor:
    """Unflatten square token grids, gate them, and flatten back."""
    if isinstance(gate, nn.Identity):
        return tokens
    return flatten_features(gate(unflatten_tokens(tokens)))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``n_heads`` heads.

    Head ``i`` uses rows ``i*d_k:(i+1)*d_k`` of the query/key/value projections;
    the concatenated heads pass through ``out_proj``.
    """

    def __init__(self, d_model: int = 256, n_heads: int = 8, bias: bool = True):
        super().__init__()
        if n_heads < 1 or d_model % n_heads != 0:
            raise ConfigurationError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=bias)
        self.k_proj = nn.Linear(d_model, d_model, bias=bias)
        self.v_proj = nn.Linear(d_model, d_model, bias=bias)
        self.out_proj = nn.Linear(d_model, d_model, bias=bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_k).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
        if k.shape[1] != v.shape[1]:
            raise ContractError(f"key length {k.shape[1]} != value length {v.shape[1]}")
        for name, t in (("query", q), ("key", k), ("value", v)):
            if t.dim() != 3 or t.shape[-1] != self.d_model:
                raise ContractError(f"{name} must be (B, n, {self.d_model}), got {tuple(t.shape)}")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.d_k)
        weights = scores.softmax(dim=-1)
        heads = (weights @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], self.d_model)
        out = self.out_proj(heads)
        if return_weights:
            return out, weights
        return out


def positional_encoding(grid_h: int, grid_w: int, d: int, temperature: float = 10000.0,
                        dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """2-D sinusoidal encoding of shape ``(grid_h * grid_w, d)``.

    The first ``d/2`` channels encode the row index and the last ``d/2`` the
    column index; inside each half, even channels hold sines and odd channels
    cosines of ``pos / temperature**(2j / (d/2))``.
    """
    if d % 4 != 0:
        raise ConfigurationError(f"positional encoding width {d} must be divisible by 4")
    half = d // 2
    j = torch.arange(half // 2, dtype=torch.float64)
    inv_freq = temperature ** (-2.0 * j / half)

    def encode(positions: torch.Tensor) -> torch.Tensor:
        angles = positions[:, None] * inv_freq[None, :]
        return torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(1)

    rows = encode(torch.arange(grid_h, dtype=torch.float64))
    cols = encode(torch.arange(grid_w, dtype=torch.float64))
    pe = torch.cat([
        rows[:, None, :].expand(grid_h, grid_w, half),
        cols[None, :, :].expand(grid_h, grid_w, half),
    ], dim=-1)
    return pe.reshape(grid_h * grid_w, d).to(dtype=dtype, device=device)


class FeedForward(nn.Module):
    """Residual two-layer MLP: ``x + w2 relu(w1 x + b1) + b2``."""

    def __init__(self, d_model: int, d_ff: int = 1024, dropout: float = 0.1):
        super().__init__()
        if d_ff < 1:
            raise ConfigurationError(f"feed-forward width must be positive, got {d_ff}")
        self.d_model = d_model
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_model:
            raise ContractError(f"feed-forward built for width {self.d_model}, got {x.shape[-1]}")
        return x + self.dropout(self.linear2(self.dropout(F.relu(self.linear1(x)))))
