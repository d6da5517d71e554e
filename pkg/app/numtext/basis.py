# app/numtext/basis.py
"""Sinusoidal positional encoding and the [NUM] / [IS] embedding bases."""

import logging
import math
from dataclasses import dataclass

import torch

from app.diffmath import DTYPE
from app.utils.errors import NumBasisError

logger = logging.getLogger(__name__)


def sinusoidal_encoding(max_len: int, d: int, reserved_dims: int = 0) -> torch.Tensor:
    """(max_len, d) fixed sinusoids over the first d - reserved_dims columns;
    the trailing reserved columns stay zero."""
    if reserved_dims < 0 or reserved_dims > d:
        raise NumBasisError(f"reserved_dims must lie in [0, {d}], got {reserved_dims}")
    d_pe = d - reserved_dims
    pe = torch.zeros(max_len, d, dtype=DTYPE)
    if d_pe == 0:
        return pe
    position = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_pe, 2, dtype=DTYPE) * (-math.log(10000.0) / d_pe))
    pe[:, 0:d_pe:2] = torch.sin(position * div)
    pe[:, 1:d_pe:2] = torch.cos(position * div[: d_pe // 2])
    return pe


@dataclass(frozen=True)
class NumBasis:
    """num: unit vector orthogonal to every PE row; is_: the [IS] embedding."""

    num: torch.Tensor
    is_: torch.Tensor
    pe: torch.Tensor

    @property
    def d(self) -> int:
        return self.num.shape[0]

    @property
    def max_len(self) -> int:
        return self.pe.shape[0]

    def max_pe_overlap(self) -> float:
        return float((self.pe @ self.num).abs().max())


def build_num_basis(d: int, max_len: int, seed: int = 0, reserved_dims: int = 2) -> NumBasis:
    """Chooses [NUM] in the null space of the PE row span (seeded direction)."""
    pe = sinusoidal_encoding(max_len, d, reserved_dims)
    _, s, vh = torch.linalg.svd(pe, full_matrices=True)
    tol = s.max().item() * max(pe.shape) * torch.finfo(DTYPE).eps if s.numel() else 0.0
    rank = int((s > tol).sum())
    if rank >= d:
        raise NumBasisError(
            f"Positional encoding spans all {d} dimensions (rank {rank}); "
            f"increase d or reserve dimensions for [NUM]"
        )
    row_space, null_space = vh[:rank], vh[rank:]
    gen = torch.Generator().manual_seed(seed)
    num = torch.randn(null_space.shape[0], generator=gen, dtype=DTYPE) @ null_space
    if rank:
        num = num - row_space.T @ (row_space @ num)
    num = num / num.norm()

    is_ = torch.randn(d, generator=gen, dtype=DTYPE)
    is_ = is_ - (is_ @ num) * num
    # [IS] carries word-embedding magnitude; only [NUM] is unit length.
    is_ = is_ / is_.norm() * math.sqrt(d)
    basis = NumBasis(num=num, is_=is_, pe=pe)
    logger.debug(f"NumBasis d={d} max_len={max_len} PE rank={rank} overlap={basis.max_pe_overlap():.2e}")
    return basis
