"""Input validation and small model-state helpers shared across estimators."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

from .audio_io import SAMPLE_RATE, Waveform
from .exceptions import DataError


def check_waveform(w, min_samples: int = 1, name: str = "waveform") -> Waveform:
    if not isinstance(w, Waveform):
        w = Waveform(np.asarray(w, dtype=np.float32))
    if w.sample_rate != SAMPLE_RATE:
        raise DataError(f"{name} must be {SAMPLE_RATE} Hz, got {w.sample_rate}")
    if len(w) < min_samples:
        raise DataError(f"{name} has {len(w)} samples, need at least {min_samples}")
    return w


def check_token_ids(ids, upper: int, name: str = "ids") -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= upper):
        raise DataError(f"{name} must lie in [0, {upper}), got range [{arr.min()}, {arr.max()}]")
    return arr


def as_matrix(x, width: int | None = None, name: str = "matrix") -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    if t.dim() != 2:
        raise DataError(f"{name} must be 2-D, got shape {tuple(t.shape)}")
    if width is not None and t.shape[1] != width:
        raise DataError(f"{name} must have width {width}, got {t.shape[1]}")
    return t.float()


def parameter_checksum(module: torch.nn.Module) -> str:
    """sha256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
        p.grad = None  # stale gradients from training would leak into later optimizers
    return module


def set_deterministic(seed: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    if seed is not None:
        torch.manual_seed(seed)
