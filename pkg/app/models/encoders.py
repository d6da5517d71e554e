# app/models/encoders.py
"""Knowledge-aware text prompts and prompted video encoding.

Text side: each class i gets K learnable context vectors X_i^k, shifted by a
per-slot projection of its description embedding,

    C_i^k = Proj^k(DescEmbed(Desc_i)) + X_i^k,

and the frozen text encoder reads [C_i^1..C_i^K, keyword tokens, class token,
<eos>]; F_i^T is the unit-normalized <eos> output.

Video side: frame features are linearly tokenized, and before every frozen
vision layer a summary token S (attention pooling with a learned query), the
layer's global tokens G and one local token per frame L are appended. F^V is
the unit-normalized summary token after the last layer.
"""

import logging
import math
import re
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from app.diffmath import DTYPE
from app.diffmath import ops
from app.models.transformer import FrozenTextEncoder, FrozenVisionEncoder
from app.numtext.basis import sinusoidal_encoding
from app.numtext.vocab import EOS_ID, prose_words
from app.utils.errors import ModelError, SequenceTooLongError
from app.utils.models import ClassKnowledge

logger = logging.getLogger(__name__)

_SENTENCE_END = re.compile(r"[.!?;]+")


def _normal(gen: torch.Generator, *shape: int, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen, dtype=DTYPE) * std)


# --- description embedding ---

def description_token_ids(desc: str, encoder: FrozenTextEncoder) -> List[List[int]]:
    """Word ids per sentence; words outside the vocabulary are dropped."""
    sentences = []
    for sentence in _SENTENCE_END.split(desc):
        ids = []
        for word in prose_words(sentence):
            if word in encoder.vocab:
                ids.append(encoder.vocab.token_id(word))
            else:
                logger.warning(f"Description word '{word}' not in vocabulary; dropped")
        if ids:
            sentences.append(ids)
    return sentences


def embed_description(desc: str, encoder: FrozenTextEncoder) -> torch.Tensor:
    """Mean over sentences of the mean-pooled frozen-encoder states of each sentence."""
    if not desc or not desc.strip():
        raise ModelError("Cannot embed an empty class description")
    sentences = description_token_ids(desc, encoder)
    if not sentences:
        raise ModelError(f"Class description has no in-vocabulary words: '{desc[:60]}'")
    pooled = []
    with torch.no_grad():
        for ids in sentences:
            if len(ids) > encoder.max_len:
                raise SequenceTooLongError(len(ids), encoder.max_len)
            x = ops.add(encoder.embed_ids(torch.tensor(ids, dtype=torch.long)), encoder.positions(len(ids)))
            pooled.append(ops.mean(encoder.encode(x.unsqueeze(0))[0], dim=0))
    return ops.mean(torch.stack(pooled), dim=0)


# --- text prompts ---

class PromptBundle(nn.Module):
    """Learnable class context X (N_cls, K, d) plus the slot projections Proj^k.

    With ``per_class_projection`` every (class, slot) pair gets its own
    projection; otherwise a slot's projection is shared by all classes. With
    ``use_kapt`` off the context is X alone and no keyword tokens are used.
    """

    def __init__(
        self,
        n_classes: int,
        d: int = 64,
        k_ctx: int = 8,
        hidden: Optional[int] = None,
        per_class_projection: bool = False,
        use_kapt: bool = True,
        proj_bias: bool = True,
        ctx_std: float = 0.02,
        seed: int = 0,
    ):
        super().__init__()
        if n_classes < 1 or k_ctx < 1:
            raise ModelError(f"PromptBundle needs n_classes >= 1 and k_ctx >= 1, got {n_classes}, {k_ctx}")
        gen = torch.Generator().manual_seed(seed)
        hidden = hidden or d
        self.n_classes, self.d, self.k_ctx = n_classes, d, k_ctx
        self.per_class_projection = per_class_projection
        self.use_kapt = use_kapt
        n_proj = n_classes if per_class_projection else 1
        self.ctx = _normal(gen, n_classes, k_ctx, d, std=ctx_std)
        self.proj_w1 = _normal(gen, n_proj, k_ctx, d, hidden, std=d ** -0.5)
        self.proj_w2 = _normal(gen, n_proj, k_ctx, hidden, d, std=hidden ** -0.5 * 0.1)
        if proj_bias:
            self.proj_b1 = nn.Parameter(torch.zeros(n_proj, k_ctx, hidden, dtype=DTYPE))
            self.proj_b2 = nn.Parameter(torch.zeros(n_proj, k_ctx, d, dtype=DTYPE))
        else:
            self.proj_b1 = self.proj_b2 = None
        self._desc_cache: Dict[Tuple[str, ...], torch.Tensor] = {}

    def project(self, desc_embeddings: torch.Tensor) -> torch.Tensor:
        """(N_cls, d) description embeddings -> (N_cls, K, d) slot projections."""
        e = desc_embeddings.unsqueeze(1).unsqueeze(2)  # (N, 1, 1, d)
        h = (e @ self.proj_w1).squeeze(2)  # (N or 1 broadcast, K, hidden)
        if self.proj_b1 is not None:
            h = h + self.proj_b1
        h = ops.gelu(h)
        out = (h.unsqueeze(2) @ self.proj_w2).squeeze(2)
        if self.proj_b2 is not None:
            out = out + self.proj_b2
        return out

    def description_embeddings(self, knowledge: Sequence[ClassKnowledge], encoder: FrozenTextEncoder) -> torch.Tensor:
        key = tuple(c.description for c in knowledge)
        if key not in self._desc_cache:
            self._desc_cache[key] = torch.stack([embed_description(c.description, encoder) for c in knowledge])
        return self._desc_cache[key]


def build_class_prompts(
    knowledge: Sequence[ClassKnowledge],
    bundle: PromptBundle,
    encoder: Optional[FrozenTextEncoder] = None,
    desc_embeddings: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """C (N_cls, K, d). Description embeddings are computed with ``encoder``
    unless given directly."""
    if len(knowledge) != bundle.n_classes:
        raise ModelError(f"PromptBundle built for {bundle.n_classes} classes, got {len(knowledge)}")
    if not bundle.use_kapt:
        return bundle.ctx
    if desc_embeddings is None:
        if encoder is None:
            raise ModelError("build_class_prompts needs an encoder or precomputed description embeddings")
        desc_embeddings = bundle.description_embeddings(knowledge, encoder)
    return ops.add(bundle.project(desc_embeddings), bundle.ctx)


def _class_suffix_ids(c: ClassKnowledge, encoder: FrozenTextEncoder, use_keywords: bool) -> List[int]:
    ids = []
    if use_keywords:
        for word in c.keywords or []:
            if word in encoder.vocab:
                ids.append(encoder.vocab.token_id(word))
            else:
                logger.warning(f"Keyword '{word}' of class '{c.name}' not in vocabulary; dropped")
    ids.append(encoder.vocab.token_id(c.name.lower()))
    return ids + [EOS_ID]


def encode_text(
    bundle: PromptBundle, knowledge: Sequence[ClassKnowledge], encoder: FrozenTextEncoder
) -> torch.Tensor:
    """F^T (N_cls, d), unit rows."""
    ctx = build_class_prompts(knowledge, bundle, encoder)
    rows = []
    for i, c in enumerate(knowledge):
        suffix = encoder.embed_ids(torch.tensor(_class_suffix_ids(c, encoder, bundle.use_kapt), dtype=torch.long))
        rows.append(ops.concat([ctx[i], suffix], dim=0, node="text_prompt"))
    lengths = torch.tensor([r.shape[0] for r in rows], dtype=torch.long)
    longest = int(lengths.max())
    if longest > encoder.max_len:
        raise SequenceTooLongError(longest, encoder.max_len)
    padded = [
        ops.concat([r, torch.zeros(longest - r.shape[0], encoder.d, dtype=DTYPE)], dim=0) if r.shape[0] < longest else r
        for r in rows
    ]
    x = ops.add(torch.stack(padded), encoder.positions(longest))
    return ops.l2_normalize(encoder.pool_last(x, lengths))


# --- video prompts ---

class FrameTokenizer(nn.Module):
    """Linear map of per-frame features to tokens, plus a fixed temporal encoding."""

    def __init__(self, f_in: int, d: int, window: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.f_in, self.d, self.window = f_in, d, window
        self.weight = _normal(gen, f_in, d, std=f_in ** -0.5)
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.register_buffer("temporal", sinusoidal_encoding(window, d), persistent=False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() not in (2, 3) or tuple(frames.shape[-2:]) != (self.window, self.f_in):
            raise ModelError(
                f"Expected frames of shape (T={self.window}, F_in={self.f_in}), got {tuple(frames.shape)}"
            )
        return ops.add(ops.matmul(frames.to(DTYPE), self.weight) + self.bias, self.temporal)


class VideoPromptState(nn.Module):
    """Per-layer summary query and projection, global tokens and local projection."""

    def __init__(self, d: int, n_layers: int, f_in: int, window: int = 70, n_global: int = 2, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 17)
        self.d, self.n_layers, self.n_global = d, n_layers, n_global
        self.tokenizer = FrameTokenizer(f_in, d, window, seed)
        self.summary_query = _normal(gen, n_layers, d, std=d ** -0.5)
        self.summary_proj = _normal(gen, n_layers, d, d, std=d ** -0.5)
        self.global_tokens = _normal(gen, n_layers, n_global, d, std=0.02)
        self.local_proj = _normal(gen, n_layers, d, d, std=d ** -0.5)

    @property
    def window(self) -> int:
        return self.tokenizer.window


def video_prompt_step(
    z_prev: torch.Tensor, state: VideoPromptState, layer: int
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(S (.., 1, d), G (.., n_global, d), L (.., T, d)) for 1-based ``layer``."""
    if not 1 <= layer <= state.n_layers:
        raise ModelError(f"Layer index {layer} outside 1..{state.n_layers}")
    l = layer - 1
    scores = ops.matmul(z_prev, state.summary_query[l]) / math.sqrt(state.d)  # (.., T)
    weights = ops.softmax(scores, dim=-1).unsqueeze(-2)  # (.., 1, T)
    summary = ops.matmul(weights @ z_prev, state.summary_proj[l])
    glob = state.global_tokens[l].expand(*z_prev.shape[:-2], state.n_global, state.d)
    local = ops.matmul(z_prev, state.local_proj[l])
    return summary, glob, local


def encode_video(frames: torch.Tensor, state: VideoPromptState, encoder: FrozenVisionEncoder) -> torch.Tensor:
    """F^V for (T, F_in) or (B, T, F_in) frames; unit rows."""
    if encoder.n_layers != state.n_layers or encoder.d != state.d:
        raise ModelError(
            f"Prompt state (layers={state.n_layers}, d={state.d}) does not match "
            f"vision encoder (layers={encoder.n_layers}, d={encoder.d})"
        )
    z = state.tokenizer(frames)
    n_frames = z.shape[-2]
    summary_out = None
    for layer in range(1, state.n_layers + 1):
        summary, glob, local = video_prompt_step(z, state, layer)
        out = encoder.layer(layer - 1, ops.concat([z, summary, glob, local], dim=-2, node=f"video_layer_{layer}"))
        z = out[..., :n_frames, :]
        summary_out = out[..., n_frames, :]
    return ops.l2_normalize(encoder.final_norm(summary_out))
