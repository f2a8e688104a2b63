"""The complete Siamese network: backbone, matcher stacks, alignment, heads."""
from __future__ import annotations

import torch
from torch import nn

from .alignment import DualAlignment
from .attention import flatten_features
from .backbone import Backbone, BackboneConfig
from .config import RunConfig
from .heads import ClassificationHead, RegressionHead
from .matching import MatcherStack, MatcherStackConfig


class MAPNet(nn.Module):
    """Maps (template, search) patch batches to per-candidate logits and boxes.

    Architecture switches in ``cfg.model`` reproduce the ablation variants:
    ``shared_stack`` feeds one matcher stack to both heads, ``cls_gate`` /
    ``reg_gate`` pick the matcher flavour per branch, ``alignment`` toggles the
    dual alignment module.
    """

    def __init__(self, cfg: RunConfig = RunConfig()):
        super().__init__()
        self.cfg = cfg
        m = cfg.model
        b = cfg.backbone
        self.backbone = Backbone(BackboneConfig(b.variant, tuple(b.stage_channels), m.d_model, b.dilation_in_last_stage))

        def stack(gate):
            return MatcherStack(MatcherStackConfig(cfg.matcher.depth, gate, m.normalization_mode), m.d_model,
                                m.n_heads, m.ffn_dim, m.channel_reduction, m.spatial_kernel, m.dropout)

        self.cls_stack = stack(m.cls_gate)
        self.reg_stack = None if m.shared_stack else stack(m.reg_gate)
        self.align = (DualAlignment(m.d_model, m.n_heads, m.channel_reduction, m.spatial_kernel, m.normalization_mode)
                      if m.alignment else None)
        self.cls_head = ClassificationHead(m.d_model, m.head_hidden)
        self.reg_head = RegressionHead(m.d_model, m.head_hidden)
        self.register_buffer("pixel_mean", torch.tensor(b.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(b.std).view(1, 3, 1, 1), persistent=False)

    def standardize(self, patches: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` pixel values in [0, 255] -> standardized ``(B, 3, H, W)``."""
        x = patches.permute(0, 3, 1, 2).contiguous() / 255.0
        return (x - self.pixel_mean.to(x.dtype)) / self.pixel_std.to(x.dtype)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Standardized images -> flattened backbone tokens ``(B, n, d)``."""
        return flatten_features(self.backbone(images))

    def predict_tokens(self, v_z: torch.Tensor, v_x: torch.Tensor) -> dict:
        s_c = self.cls_stack(v_z, v_x)
        s_p = s_c if self.reg_stack is None else self.reg_stack(v_z, v_x)
        if self.align is not None:
            s_c, s_p = self.align(s_c, s_p)
        return {"logits": self.cls_head(s_c), "boxes": self.reg_head(s_p)}

    def forward(self, template: torch.Tensor, search: torch.Tensor) -> dict:
        """Both inputs standardized ``(B, 3, H, W)``."""
        return self.predict_tokens(self.encode(template), self.encode(search))

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        backbone = list(self.backbone.parameters())
        ids = {id(p) for p in backbone}
        return backbone, [p for p in self.parameters() if id(p) not in ids]


def build_model(cfg: RunConfig, seed: int | None = None) -> MAPNet:
    if seed is not None:
        torch.manual_seed(seed)
    model = MAPNet(cfg)
    init_weights(model)
    if cfg.backbone.pretrained:
        model.backbone.load_pretrained(cfg.backbone.pretrained)
    return model


def init_weights(model: nn.Module) -> None:
    """Fan-in uniform linear weights, zero biases, and neutral (0.5) attention gates."""
    from .attention import ChannelAttention, SpatialAttention

    for module in model.modules():
        if isinstance(module, nn.Linear):
            bound = 1.0 / module.in_features ** 0.5
            nn.init.uniform_(module.weight, -bound, bound)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
    for module in model.modules():
        if isinstance(module, ChannelAttention):
            nn.init.zeros_(module.fc2.weight)
        elif isinstance(module, SpatialAttention):
            nn.init.zeros_(module.conv.weight)
            nn.init.zeros_(module.conv.bias)
