# app/diffmath/ops.py
"""Forward op-kinds used by the pipeline. Each op validates shapes and raises
ShapeMismatchError naming the node; gradients come from torch autograd."""

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from app.utils.errors import ShapeMismatchError

LAYER_NORM_EPS = 1e-5
# Inputs to layer normalization are expected in [-LAYER_NORM_RANGE, LAYER_NORM_RANGE].
LAYER_NORM_RANGE = 2.5


def _broadcast(node: str, *tensors: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(*(t.shape for t in tensors))
    except RuntimeError as e:
        raise ShapeMismatchError(node, [t.shape for t in tensors], str(e)) from e


def matmul(a: torch.Tensor, b: torch.Tensor, node: str = "matmul") -> torch.Tensor:
    if a.dim() == 0 or b.dim() == 0:
        raise ShapeMismatchError(node, [a.shape, b.shape], "scalars are not matrices")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeMismatchError(node, [a.shape, b.shape])
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor, node: str = "add") -> torch.Tensor:
    _broadcast(node, a, b)
    return a + b


def scale(a: torch.Tensor, factor, node: str = "scale") -> torch.Tensor:
    if isinstance(factor, torch.Tensor):
        _broadcast(node, a, factor)
    return a * factor


def concat(tensors: Sequence[torch.Tensor], dim: int = 0, node: str = "concat") -> torch.Tensor:
    if not tensors:
        raise ShapeMismatchError(node, [], "nothing to concatenate")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != dim % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, other))
        ):
            raise ShapeMismatchError(node, [s.shape for s in tensors])
    return torch.cat(list(tensors), dim=dim)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor, node: str = "embedding") -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeMismatchError(node, [table.shape], "embedding table must be 2-D")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeMismatchError(node, [table.shape, ids.shape], "index out of range")
    return table[ids]


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def layer_norm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = LAYER_NORM_EPS,
    node: str = "layer_norm",
) -> torch.Tensor:
    """Normalizes the last axis. Constant inputs map to zeros (pre-affine)."""
    d = x.shape[-1]
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeMismatchError(node, [x.shape, p.shape])
    return F.layer_norm(x, (d,), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sum(x: torch.Tensor, dim=None) -> torch.Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, node: str = "cosine") -> torch.Tensor:
    """Cosine along the last axis; both operands broadcast against each other."""
    _broadcast(node, a, b)
    return (l2_normalize(a) * l2_normalize(b)).sum(dim=-1)


def multi_head_attention(
    x_q: torch.Tensor,
    x_kv: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    n_heads: int,
    allowed: Optional[torch.Tensor] = None,
    node: str = "attention",
) -> torch.Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    x_q: (..., Tq, d), x_kv: (..., Tk, d), weights (d, d).
    allowed: boolean mask broadcastable to (..., Tq, Tk); False blocks a key.
    """
    d = x_q.shape[-1]
    if x_kv.shape[-1] != d or d % n_heads:
        raise ShapeMismatchError(node, [x_q.shape, x_kv.shape], f"n_heads={n_heads}")
    for w in (w_q, w_k, w_v, w_o):
        if tuple(w.shape) != (d, d):
            raise ShapeMismatchError(node, [x_q.shape, w.shape])
    head_dim = d // n_heads

    def split(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-1], n_heads, head_dim).transpose(-3, -2)

    q = split(matmul(x_q, w_q, node))
    k = split(matmul(x_kv, w_k, node))
    v = split(matmul(x_kv, w_v, node))
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(head_dim)
    if allowed is not None:
        logits = logits.masked_fill(~allowed.unsqueeze(-3), float("-inf"))
    weights = softmax(logits, dim=-1)
    out = (weights @ v).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    return matmul(out, w_o, node)
