"""Flat named-tensor archives with partition-prefixed names."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .denoiser import BaseDenoiser, GlyphDenoiser, UNetConfig
from .training import MaskPredictor, partition_params

WEIGHTS = "weights.npz"


def _prefixes(model: nn.Module) -> dict:
    if isinstance(model, GlyphDenoiser):
        part = partition_params(model)
        return {n: part.label(n) for n, _ in model.named_parameters()}
    return {n: "trainable" if p.requires_grad else "frozen" for n, p in model.named_parameters()}


def named_arrays(model: nn.Module) -> dict:
    labels = _prefixes(model)
    return {f"{labels[n]}.{n}": p.detach().cpu().numpy() for n, p in model.named_parameters()}


def tensor_checksum(tensors) -> str:
    """SHA-256 over names and raw bytes, independent of archive metadata."""
    h = hashlib.sha256()
    items = tensors.items() if isinstance(tensors, dict) else tensors
    for name, t in sorted(items, key=lambda kv: kv[0]):
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def model_checksum(model: nn.Module) -> str:
    return tensor_checksum(dict(model.named_parameters()))


def _model_kind(model: nn.Module) -> str:
    return {GlyphDenoiser: "glyph", BaseDenoiser: "base", MaskPredictor: "mask_predictor"}[type(model)]


def save_checkpoint(model: nn.Module, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / WEIGHTS, **named_arrays(model))
    kind = _model_kind(model)
    meta = {"kind": kind, "checksum": model_checksum(model), "dtype": str(next(model.parameters()).dtype)}
    if kind == "mask_predictor":
        meta["config"] = model.config()
    else:
        meta["config"] = asdict(model.cfg)
        meta["trained"] = bool(getattr(model, "trained", False))
    if extra:
        meta.update(extra)
    (directory / "config.json").write_text(json.dumps(meta, indent=1))
    if kind == "glyph":
        (directory / "partition.json").write_text(json.dumps(partition_params(model).manifest(model), indent=1))
    return directory


def load_weights_into(model: nn.Module, directory: str | Path) -> nn.Module:
    arrays = np.load(Path(directory) / WEIGHTS)
    state = {}
    for key in arrays.files:
        _, name = key.split(".", 1)
        state[name] = torch.from_numpy(arrays[key].copy())
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state[name])
    return model


def load_checkpoint(directory: str | Path) -> nn.Module:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    dtype = getattr(torch, meta["dtype"].replace("torch.", ""))
    if meta["kind"] == "mask_predictor":
        model = MaskPredictor(**meta["config"])
    else:
        cfg = UNetConfig(**meta["config"])
        model = (GlyphDenoiser if meta["kind"] == "glyph" else BaseDenoiser)(cfg)
        model.trained = meta.get("trained", False)
    model = model.to(dtype)
    load_weights_into(model, directory)
    if meta["kind"] == "glyph":
        from .training import apply_partition

        apply_partition(model, partition_params(model))
    model.eval()
    return model
