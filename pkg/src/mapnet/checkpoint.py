"""Checkpoint archives: ``manifest.json`` + ``params.bin``.

``params.bin`` is a concatenation of records, one per tensor, in manifest order::

    uint32   ndim                 (little-endian)
    uint64   dims[ndim]           (little-endian)
    bytes    data                 (little-endian, C order, dtype from the manifest)

The manifest lists every tensor with its name, dtype, shape, byte offset of the
record and payload length, plus the resolved run configuration.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_dict
from .errors import DataError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1", "bool": "|b1"}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> list[dict]:
    entries = []
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.name
            if dtype not in _DTYPES:
                raise DataError(f"cannot serialize {name!r} with dtype {dtype}")
            offset = fh.tell()
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(payload)
            entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(payload)})
    return entries


def read_manifest(archive) -> dict:
    path = Path(archive) / "manifest.json"
    if not path.exists():
        raise DataError(f"{archive}: missing manifest.json")
    return json.loads(path.read_text())


def read_tensors(archive) -> dict[str, np.ndarray]:
    manifest = read_manifest(archive)
    blob = (Path(archive) / "params.bin").read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        pos = entry["offset"]
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        if list(shape) != entry["shape"]:
            raise DataError(f"{archive}: shape prefix of {entry['name']!r} disagrees with the manifest")
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos)
        out[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    return out


def save_checkpoint(archive, model: torch.nn.Module, cfg: RunConfig, extra: dict | None = None) -> Path:
    archive = Path(archive)
    archive.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    entries = write_tensors(archive / "params.bin", tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": "mapnet",
        "normalization_mode": cfg.model.normalization_mode,
        "standardization": {"mean": list(cfg.backbone.mean), "std": list(cfg.backbone.std)},
        "loss_weights": {"beta": cfg.loss.beta, "lambda_giou": cfg.loss.lambda_giou, "lambda_l1": cfg.loss.lambda_l1},
        "weight_decay": cfg.train.weight_decay,
        "config": cfg.to_dict(),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    (archive / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return archive


def load_checkpoint(archive, dtype: torch.dtype | None = None):
    """Rebuild the model stored in ``archive``; returns ``(model, cfg, manifest)`` in eval mode."""
    from .model import MAPNet

    manifest = read_manifest(archive)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{archive}: unsupported checkpoint format {manifest.get('format_version')!r}")
    cfg = from_dict(manifest["config"])
    model = MAPNet(cfg)
    state = {k: torch.from_numpy(v) for k, v in read_tensors(archive).items()}
    model.load_state_dict(state, strict=True)
    if dtype is not None:
        model = model.to(dtype)
    model.eval()
    return model, cfg, manifest
