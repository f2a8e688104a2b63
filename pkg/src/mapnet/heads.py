"""Per-token classification and box-regression heads."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError


class PredictionHead(nn.Module):
    """Three fully-connected layers with ReLU in between, applied token-wise."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256):
        super().__init__()
        self.in_dim = in_dim
        self.layers = nn.ModuleList([nn.Linear(in_dim, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, out_dim)])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.in_dim:
            raise ContractError(f"head expects width {self.in_dim}, got {tokens.shape[-1]}")
        x = tokens
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ClassificationHead(PredictionHead):
    """Outputs (foreground, background) logits per token."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__(in_dim, 2, hidden)


class RegressionHead(PredictionHead):
    """Outputs normalized (x1, y1, x2, y2) per token, squashed into [0, 1]."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__(in_dim, 4, hidden)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(super().forward(tokens))


def classify(tokens: torch.Tensor, head: ClassificationHead) -> torch.Tensor:
    return head(tokens)


def regress(tokens: torch.Tensor, head: RegressionHead) -> torch.Tensor:
    return head(tokens)


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    return logits.softmax(dim=-1)[..., 0]
