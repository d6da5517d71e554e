# app/models/transformer.py
"""Pre-LN transformer blocks and the two frozen backbones (text / vision)."""

import logging
from typing import Dict, Optional

import torch
from torch import nn

from app.diffmath import DTYPE
from app.diffmath import ops
from app.numtext.basis import NumBasis, build_num_basis
from app.numtext.vocab import Vocabulary

logger = logging.getLogger(__name__)


def _normal(gen: torch.Generator, *shape: int, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen, dtype=DTYPE) * std)


class TransformerBlock(nn.Module):
    """x + Attn(LN(x)) followed by x + MLP(LN(x)); CLIP-style initialization."""

    def __init__(self, d: int, n_heads: int, n_layers: int, gen: torch.Generator, mlp_ratio: int = 4):
        super().__init__()
        self.n_heads = n_heads
        attn_std = d ** -0.5
        proj_std = d ** -0.5 * (2 * n_layers) ** -0.5
        fc_std = (2 * d) ** -0.5
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.w_q = _normal(gen, d, d, std=attn_std)
        self.w_k = _normal(gen, d, d, std=attn_std)
        self.w_v = _normal(gen, d, d, std=attn_std)
        self.w_o = _normal(gen, d, d, std=proj_std)
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.fc1 = _normal(gen, d, mlp_ratio * d, std=fc_std)
        self.fc1_b = nn.Parameter(torch.zeros(mlp_ratio * d, dtype=DTYPE))
        self.fc2 = _normal(gen, mlp_ratio * d, d, std=proj_std)
        self.fc2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = ops.layer_norm(x, self.ln1_w, self.ln1_b)
        x = ops.add(x, ops.multi_head_attention(h, h, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads, allowed))
        h = ops.layer_norm(x, self.ln2_w, self.ln2_b)
        h = ops.gelu(ops.matmul(h, self.fc1) + self.fc1_b)
        return ops.add(x, ops.matmul(h, self.fc2) + self.fc2_b)


def causal_mask(length: int, prefix: int = 0) -> torch.Tensor:
    """allowed[i, j]: lower-triangular, with the first ``prefix`` positions fully visible to each other."""
    allowed = torch.tril(torch.ones(length, length, dtype=torch.bool))
    if prefix:
        allowed[:prefix, :prefix] = True
    return allowed


class FrozenEncoder(nn.Module):
    """Stack of transformer blocks with a final layer norm; weights never train."""

    def __init__(self, d: int = 64, n_layers: int = 4, n_heads: int = 4, seed: int = 0):
        super().__init__()
        self.d, self.n_layers, self.n_heads, self.seed = d, n_layers, n_heads, seed
        self._gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList(TransformerBlock(d, n_heads, n_layers, self._gen) for _ in range(n_layers))
        self.ln_final_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln_final_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def freeze(self) -> "FrozenEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def final_norm(self, x: torch.Tensor) -> torch.Tensor:
        return ops.layer_norm(x, self.ln_final_w, self.ln_final_b)

    def load_weights(self, tensors: Dict[str, torch.Tensor]) -> None:
        """Loads weights saved with app.diffmath.checkpoint (strict)."""
        with torch.no_grad():
            self.load_state_dict({k: v.to(DTYPE) for k, v in tensors.items()}, strict=True)


class FrozenTextEncoder(FrozenEncoder):
    """Causal text backbone over a closed vocabulary with the numeric bases."""

    def __init__(
        self,
        vocab: Vocabulary,
        d: int = 64,
        n_layers: int = 4,
        n_heads: int = 4,
        max_len: int = 128,
        seed: int = 0,
        reserved_dims: int = 2,
    ):
        super().__init__(d, n_layers, n_heads, seed)
        self.vocab = vocab
        self.max_len = max_len
        self.basis: NumBasis = build_num_basis(d, max_len, seed=seed, reserved_dims=reserved_dims)
        self.token_embedding = _normal(self._gen, vocab.size, d, std=1.0)
        self.freeze()
        logger.debug(f"Text encoder d={d} layers={n_layers} heads={n_heads} vocab={vocab.size}")

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        """Token embeddings for public token ids (any shape)."""
        dense = torch.tensor([self.vocab.index(int(t)) for t in ids.reshape(-1)], dtype=torch.long)
        return ops.embedding_lookup(self.token_embedding, dense).reshape(*ids.shape, self.d)

    def positions(self, length: int) -> torch.Tensor:
        return self.basis.pe[:length]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, d) input embeddings (PE already added) -> (B, T, d) hidden states."""
        allowed = causal_mask(x.shape[-2])
        for block in self.blocks:
            x = block(x, allowed)
        return self.final_norm(x)

    def pool_last(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Final-token representation of each right-padded sequence."""
        hidden = self.encode(x)
        return hidden[torch.arange(hidden.shape[0]), lengths - 1]


class FrozenVisionEncoder(FrozenEncoder):
    """Bidirectional vision backbone; per-layer access for prompt insertion."""

    def __init__(self, d: int = 64, n_layers: int = 4, n_heads: int = 4, seed: int = 1):
        super().__init__(d, n_layers, n_heads, seed)
        self.freeze()

    def layer(self, index: int, x: torch.Tensor) -> torch.Tensor:
        return self.blocks[index](x)