"""Versioned little-endian tensor container and key=value config files.

Container layout::

    magic   b"CTTS"
    u32     format version
    u32     tensor count
    per tensor:
        u32 name length, utf-8 name
        u32 rank, rank x u64 dims
        float32 data (C order)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, DataError

MAGIC = b"CTTS"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(_to_numpy(value), dtype="<f4", order="C")  # keeps 0-d shape
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a tensor container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        offset = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, offset)
            offset += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            out[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt container ({exc})") from exc
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    return out


def _to_numpy(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"config not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_tokens(path, tokens) -> None:
    Path(path).write_text("".join(f"{int(t)}\n" for t in tokens))


def read_tokens(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"token file not found: {path}")
    try:
        return [int(line) for line in path.read_text().split()]
    except ValueError as exc:
        raise DataError(f"{path}: token files hold one integer id per line") from exc


def load_module_state(module, tensors: dict, path="<memory>") -> None:
    import torch

    state = {k: torch.as_tensor(v) for k, v in tensors.items()}
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match the model ({exc})") from exc
