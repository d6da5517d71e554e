# app/diffmath/checkpoint.py
"""Checkpoint file: parameter name -> (shape, flat float64 values).

Layout (little-endian, see docs/formats.md):
    magic    8 bytes  b"GVLMCKPT"
    version  uint32
    count    uint32
    repeated count times:
        name_len uint16, name utf-8 bytes
        ndim     uint8,  dims uint32 * ndim
        data     float64 * prod(dims), row-major
"""

import logging
import os
import struct
from typing import Dict, Mapping

import numpy as np
import torch

from app.diffmath import DTYPE
from app.utils.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"GVLMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str, tensors: Mapping[str, torch.Tensor]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name in sorted(tensors):
            value = tensors[name].detach().to(DTYPE).contiguous()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", value.dim()))
            f.write(struct.pack(f"<{value.dim()}I", *value.shape))
            f.write(value.numpy().astype("<f8").tobytes(order="C"))
    logger.info(f"Checkpoint with {len(tensors)} tensors saved to {path}")
    return path


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise CheckpointFormatError("Truncated checkpoint file")
    return struct.unpack(fmt, raw)


def load_checkpoint(path: str) -> Dict[str, torch.Tensor]:
    if not os.path.exists(path):
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    tensors: Dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint file")
        version, count = _read(f, "<II")
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = _read(f, "<H")
            name = f.read(name_len).decode("utf-8")
            (ndim,) = _read(f, "<B")
            shape = _read(f, f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointFormatError(f"Truncated data for '{name}'")
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            tensors[name] = torch.from_numpy(data.copy()).reshape(shape)
    logger.debug(f"Loaded {len(tensors)} tensors from {path}")
    return tensors
