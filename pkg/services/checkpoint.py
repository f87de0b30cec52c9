"""
Checkpoint
Versioned, checksummed container for model, optimizer and replay state

Layout: magic b"DTQNCKPT" | u32 version | u64 header length | JSON header |
raw little-endian blocks in header order | sha256 of everything before it
"""

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, NamedTuple

import numpy as np
import torch
from torch import nn

from services.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DTQNCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST_SIZE = 32


class Checkpoint(NamedTuple):
    header: Dict[str, Any]
    blocks: Dict[str, np.ndarray]


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype == np.bool_:
        return array.astype("|u1")
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot store {type(value).__name__} in a checkpoint header")


def save_checkpoint(path, header: Dict[str, Any], blocks: Dict[str, np.ndarray]) -> Path:
    """Write atomically: a temp file in the same directory, then os.replace"""
    path = Path(path)
    table = []
    payload = []
    offset = 0
    for name, array in blocks.items():
        raw = _little_endian(array)
        data = raw.tobytes()
        table.append({
            "name": name,
            "dtype": raw.dtype.str,
            "bool": array.dtype == np.bool_,
            "shape": list(raw.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        payload.append(data)
        offset += len(data)

    header_bytes = json.dumps({**header, "blocks": table}, sort_keys=True, default=_jsonable).encode("utf-8")
    body = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(payload)
    digest = hashlib.sha256(body).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(digest)
    os.replace(tmp, path)
    logger.info(f"💾 Checkpoint written to {path} ({len(body) + _DIGEST_SIZE} bytes)")
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a container; nothing is returned unless every check passes"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint '{path}' not found")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + _PREFIX.size + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: file too short to be a checkpoint (truncated?)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = _PREFIX.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")

    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")

    start = len(MAGIC) + _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e

    payload = body[start + header_len:]
    blocks = {}
    for entry in header.pop("blocks"):
        chunk = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: block {entry['name']} is truncated")
        array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        blocks[entry["name"]] = array.astype(bool) if entry["bool"] else array
    return Checkpoint(header, blocks)


# -- torch state <-> blocks -------------------------------------------------


def model_blocks(prefix: str, model: nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{name}": t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def restore_model(prefix: str, model: nn.Module, blocks: Dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    restored = {}
    for name, tensor in state.items():
        key = f"{prefix}.{name}"
        if key not in blocks:
            raise CheckpointError(f"checkpoint has no block '{key}' for this model configuration")
        block = blocks[key]
        if tuple(block.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"block '{key}' has shape {tuple(block.shape)}, the configured model expects {tuple(tensor.shape)}"
            )
        restored[name] = torch.from_numpy(block.astype(block.dtype.newbyteorder("="))).to(tensor.dtype)
    model.load_state_dict(restored)


def optimizer_blocks(optimizer: torch.optim.Optimizer, model: nn.Module):
    """Adam moments as blocks keyed by parameter name, plus per-parameter step counts"""
    names = {id(p): name for name, p in model.named_parameters()}
    blocks, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            blocks[f"adam.exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy()
            blocks[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
            steps[name] = float(state["step"])
    return blocks, steps


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: nn.Module, blocks: Dict[str, np.ndarray], steps: Dict[str, float]
) -> None:
    for name, p in model.named_parameters():
        if name not in steps:
            continue
        state = {}
        for moment in ("exp_avg", "exp_avg_sq"):
            key = f"adam.{moment}.{name}"
            if key not in blocks or tuple(blocks[key].shape) != tuple(p.shape):
                raise CheckpointError(f"optimizer block '{key}' is missing or misshapen")
            state[moment] = torch.from_numpy(blocks[key].astype(blocks[key].dtype.newbyteorder("="))).to(p.dtype)
        state["step"] = torch.tensor(steps[name], dtype=torch.float32)
        optimizer.state[p] = state
