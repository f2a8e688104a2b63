import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def to_t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def set_linear(layer, w, b=None):
    with torch.no_grad():
        layer.weight.copy_(to_t(w))
        if b is not None:
            layer.bias.copy_(to_t(b))


def mha_params(mha, rng, scale=0.5, integer=False):
    """Draw weights for a MultiHeadAttention, load them, and return the oracle dict."""
    d = mha.d_model
    p = {}
    for name, layer in (("q", mha.q_proj), ("k", mha.k_proj), ("v", mha.v_proj), ("o", mha.out_proj)):
        if integer:
            w = rng.integers(-1, 2, size=(d, d)).astype(float)
            b = rng.integers(-1, 2, size=d).astype(float)
        else:
            w = rng.normal(size=(d, d)) * scale
            b = rng.normal(size=d) * scale
        set_linear(layer, w, b)
        p["w" + name], p["b" + name] = w, b
    return p


def tiny_config(**overrides):
    from mapnet.config import RunConfig

    base = {
        "model.d_model": 16, "model.n_heads": 2, "model.ffn_dim": 32, "model.dropout": 0.0, "model.head_hidden": 16,
        "model.channel_reduction": 4, "model.spatial_kernel": 3, "model.template_size": 32, "model.search_size": 64,
        "matcher.depth": 1, "backbone.stage_channels": [8, 8, 16],
        "train.epochs": 1, "train.iterations_per_epoch": 10, "train.batch_size": 2, "train.log_every": 1000,
        "data.sequences": 2, "data.length": 12, "data.frame_size": 96,
    }
    base.update(overrides)
    return RunConfig().replace(**base)
