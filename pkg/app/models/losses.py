# app/models/losses.py
"""Focal contrastive loss, numeric alignment loss with projection heads, the
combined objective and the ordinal cross-entropy used by the decoder."""

import logging
from typing import Optional, Union

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from app.diffmath import DTYPE
from app.diffmath import ops
from app.numtext.vocab import NUM_LAST_ID, Vocabulary
from app.utils.errors import LossInputError

logger = logging.getLogger(__name__)

D_MAX = NUM_LAST_ID


class FocalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(0.25, gt=0, le=1)
    gamma: float = Field(2.0, ge=0)
    tau: float = Field(0.01, gt=0)


class CombinedLossConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    omega: float = Field(0.05, ge=0)


def one_hot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise LossInputError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    return torch.nn.functional.one_hot(labels, n_classes).to(DTYPE)


def _check_one_hot(y: torch.Tensor, n_classes: int) -> None:
    if y.dim() != 2 or y.shape[1] != n_classes:
        raise LossInputError(f"targets must have shape (B, {n_classes}), got {tuple(y.shape)}")
    binary = ((y == 0) | (y == 1)).all()
    if not binary or not (y.sum(dim=1) == 1).all():
        raise LossInputError("targets must be one-hot rows")


def focal_contrastive(
    f_v: torch.Tensor, f_t: torch.Tensor, y: torch.Tensor, cfg: Optional[FocalConfig] = None
) -> torch.Tensor:
    """Batch mean of sum_i -alpha (1 - p_i)^gamma y_i log p_i with
    p = softmax(<F_i^T, F^V> / tau).

    f_v: (B, d) or (d,) unit video features; f_t: (N_cls, d) unit text features.
    """
    cfg = cfg or FocalConfig()
    f_v = f_v.unsqueeze(0) if f_v.dim() == 1 else f_v
    y = y.unsqueeze(0) if y.dim() == 1 else y
    _check_one_hot(y, f_t.shape[0])
    if y.shape[0] != f_v.shape[0]:
        raise LossInputError(f"{y.shape[0]} targets for {f_v.shape[0]} video features")
    logits = ops.matmul(f_v, f_t.T, node="focal_logits") / cfg.tau
    log_p = ops.log_softmax(logits, dim=-1)
    modulating = (1.0 - log_p.exp()) ** cfg.gamma
    per_sample = ops.sum(-cfg.alpha * modulating * y.to(DTYPE) * log_p, dim=-1)
    return ops.mean(per_sample)


def alignment_cross_entropy(
    p_num: torch.Tensor, p_t: torch.Tensor, labels: torch.Tensor, tau: float = 0.01
) -> torch.Tensor:
    """Softmax cross-entropy over <P_i^T, P^num> / tau, batch mean."""
    p_num = p_num.unsqueeze(0) if p_num.dim() == 1 else p_num
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    n_classes = p_t.shape[0]
    if labels.numel() != p_num.shape[0]:
        raise LossInputError(f"{labels.numel()} labels for {p_num.shape[0]} numeric features")
    if int(labels.min()) < 0 or int(labels.max()) >= n_classes:
        raise LossInputError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    logits = ops.matmul(p_num, p_t.T, node="alignment_logits") / tau
    log_p = ops.log_softmax(logits, dim=-1)
    return ops.mean(-log_p.gather(1, labels.unsqueeze(1)).squeeze(1))


class ProjectionHeads(nn.Module):
    """Two 2-layer perceptrons: F^T -> P^T and F^num -> P^num, unit outputs."""

    def __init__(self, d: int = 64, out_dim: Optional[int] = None, hidden: Optional[int] = None, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 101)
        out_dim = out_dim or d
        hidden = hidden or d
        self.out_dim = out_dim

        def layer(n_in: int, n_out: int) -> nn.Parameter:
            return nn.Parameter(torch.randn(n_in, n_out, generator=gen, dtype=DTYPE) * n_in ** -0.5)

        self.text_w1, self.text_w2 = layer(d, hidden), layer(hidden, out_dim)
        self.text_b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.num_w1, self.num_w2 = layer(d, hidden), layer(hidden, out_dim)
        self.num_b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))

    def text(self, f_t: torch.Tensor) -> torch.Tensor:
        h = ops.gelu(ops.matmul(f_t, self.text_w1) + self.text_b1)
        return ops.l2_normalize(ops.matmul(h, self.text_w2))

    def numeric(self, f_num: torch.Tensor) -> torch.Tensor:
        h = ops.gelu(ops.matmul(f_num, self.num_w1) + self.num_b1)
        return ops.l2_normalize(ops.matmul(h, self.num_w2))


def numeric_alignment_loss(
    f_num: torch.Tensor, f_t: torch.Tensor, labels: torch.Tensor, heads: ProjectionHeads, tau: float = 0.01
) -> torch.Tensor:
    """L_gp: each gait-parameter embedding should align with its class's text feature."""
    return alignment_cross_entropy(heads.numeric(f_num), heads.text(f_t), labels, tau)


def total_loss(
    l_k: torch.Tensor, l_gp: Optional[torch.Tensor], cfg: Optional[CombinedLossConfig] = None
) -> torch.Tensor:
    """L = L_k + omega * L_gp; L_k alone when the batch has no paired parameters."""
    cfg = cfg or CombinedLossConfig()
    if not torch.isfinite(l_k).all():
        raise LossInputError(f"L_k is not finite: {l_k}")
    if l_gp is None:
        return l_k
    if not torch.isfinite(l_gp).all():
        raise LossInputError(f"L_gp is not finite: {l_gp}")
    return ops.add(l_k, ops.scale(l_gp, cfg.omega))


def ordinal_weight(logits: torch.Tensor, tok: torch.Tensor, vocab: Vocabulary, d_max: int = D_MAX) -> torch.Tensor:
    """|argmax id - tok| / d_max per position, without gradient."""
    dense_ids = torch.tensor(vocab.dense_ids, dtype=torch.long)
    predicted = dense_ids[logits.detach().argmax(dim=-1)]
    return ((predicted - tok).abs().to(DTYPE) / d_max).detach()


def _dense_targets(tok: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    try:
        return torch.tensor([vocab.index(int(t)) for t in tok.reshape(-1)], dtype=torch.long).reshape(tok.shape)
    except KeyError as e:
        raise LossInputError(f"Token id {e.args[0]} is not in the vocabulary") from e


def token_cross_entropy(logits: torch.Tensor, tok: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    """Per-position CE for public token ids; logits over the dense vocabulary."""
    tok = torch.as_tensor(tok, dtype=torch.long)
    if logits.shape[-1] != vocab.size:
        raise LossInputError(f"logits cover {logits.shape[-1]} entries, vocabulary has {vocab.size}")
    log_p = ops.log_softmax(logits, dim=-1)
    return -log_p.gather(-1, _dense_targets(tok, vocab).unsqueeze(-1)).squeeze(-1)


def ordinal_ce(
    logits: torch.Tensor,
    tok: Union[int, torch.Tensor],
    vocab: Vocabulary,
    d_max: int = D_MAX,
    reduction: str = "mean",
) -> torch.Tensor:
    """(|argmax id - tok| / d_max) * CE(logits, tok); the weight carries no gradient."""
    tok = torch.as_tensor(tok, dtype=torch.long)
    per_position = ordinal_weight(logits, tok, vocab, d_max) * token_cross_entropy(logits, tok, vocab)
    if reduction == "none":
        return per_position
    return ops.mean(per_position)
