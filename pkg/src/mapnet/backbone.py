"""Weight-shared stride-8 feature extractors.

``toy`` is a small residual net meant to be trained from scratch on synthetic
data. ``resnet50_style`` keeps the stem and the first three residual stages of
a ResNet-50, runs the last kept stage at stride 1 with dilation 2, and drops
the final stage.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractError

TOTAL_STRIDE = 8


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "toy"
    stage_channels: tuple[int, ...] = (32, 64, 128)
    output_dim: int = 256
    dilation_in_last_stage: bool = False

    def __post_init__(self):
        if self.variant not in ("toy", "resnet50_style"):
            raise ConfigurationError(f"unknown backbone variant {self.variant!r}")
        if self.variant == "toy" and len(self.stage_channels) != 3:
            raise ConfigurationError("toy backbone needs exactly three stage widths")
        if self.output_dim < 1:
            raise ConfigurationError("backbone output_dim must be positive")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ToyBackbone(nn.Module):
    def __init__(self, stage_channels: Sequence[int] = (32, 64, 128), dilation_in_last_stage: bool = False):
        super().__init__()
        c0 = max(stage_channels[0] // 2, 1)
        stem_stride = 2 if dilation_in_last_stage else 1
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, stem_stride, padding=1, bias=False), nn.BatchNorm2d(c0), nn.ReLU())
        strides = (2, 2, 1) if dilation_in_last_stage else (2, 2, 2)
        dilations = (1, 1, 2) if dilation_in_last_stage else (1, 1, 1)
        blocks, in_ch = [], c0
        for out_ch, s, dl in zip(stage_channels, strides, dilations):
            blocks.append(BasicBlock(in_ch, out_ch, s, dl))
            in_ch = out_ch
        self.stages = nn.Sequential(*blocks)
        self.out_channels = in_ch
        # (kernel, stride, dilation) of the main path, for receptive-field bookkeeping
        self._rf_layers = [(3, stem_stride, 1)]
        for s, dl in zip(strides, dilations):
            self._rf_layers += [(3, s, dl), (3, 1, dl)]

    def forward(self, x):
        return self.stages(self.stem(x))

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s, dl in self._rf_layers:
            rf += (k - 1) * dl * jump
            jump *= s
        return rf


class ResNet50Trunk(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, True, False])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3
        self.out_channels = 1024

    def forward(self, x):
        return self.layer3(self.layer2(self.layer1(self.stem(x))))


class Backbone(nn.Module):
    """Trunk followed by a 1x1 convolution down to ``output_dim`` channels."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        if cfg.variant == "toy":
            self.trunk = ToyBackbone(cfg.stage_channels, cfg.dilation_in_last_stage)
        else:
            self.trunk = ResNet50Trunk()
        self.reduce = nn.Conv2d(self.trunk.out_channels, cfg.output_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ConfigurationError(f"patch size {h}x{w} is not divisible by {TOTAL_STRIDE}")
        return self.reduce(self.trunk(x))

    def load_pretrained(self, archive) -> list[str]:
        """Import externally supplied trunk weights from a checkpoint archive directory.

        Tensor names may be given with or without a ``backbone.`` prefix. Returns the
        names that were loaded; unknown names raise.
        """
        from .checkpoint import read_tensors

        tensors = read_tensors(archive)
        own = self.state_dict()
        loaded = {}
        for name, arr in tensors.items():
            key = name[len("backbone."):] if name.startswith("backbone.") else name
            if key not in own:
                raise ContractError(f"pretrained tensor {name!r} has no counterpart in the backbone")
            if tuple(own[key].shape) != tuple(arr.shape):
                raise ContractError(f"shape mismatch for {name!r}: {tuple(arr.shape)} vs {tuple(own[key].shape)}")
            loaded[key] = torch.as_tensor(arr).to(own[key].dtype)
        self.load_state_dict(loaded, strict=False)
        return sorted(loaded)


def extract_features(x: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """``(B, 3, H, W)`` standardized patches -> ``(B, d, H/8, W/8)`` feature grids."""
    return backbone(x)
