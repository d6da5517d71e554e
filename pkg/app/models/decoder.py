# app/models/decoder.py
"""Prefix-LM text decoder over the numeric vocabulary, and class interpretation.

The decoder reads F^num as ``n_prefix`` prefix tokens (fully visible to each
other), then generates the sentence left to right from <sos>. F^num is first
centered and whitened with the covariance of the training prefixes, then
mapped to the prefix tokens by a two-layer perceptron.

Word logits come from a linear head. The numeric block scores bucket center
c_k as ``gate(h) - sharpness * (c_k - value(h))^2``, so its most likely bucket
is the one nearest a scalar read-out of the hidden state. Numbers are read
back at bucket centers.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from app.diffmath import DTYPE
from app.diffmath import ops
from app.diffmath.graph import named_gradients, trainable
from app.diffmath.optim import OptimizerState
from app.gait.parameters import NormalizationStats, denormalize_value, load_parameter_defs
from app.gait.sentences import format_value
from app.models.losses import ordinal_ce, token_cross_entropy
from app.models.transformer import FrozenTextEncoder, TransformerBlock, causal_mask
from app.numtext.basis import sinusoidal_encoding
from app.numtext.embedding import ItemKind, embed_sequences, tokenize
from app.numtext.vocab import (
    EOS_ID,
    NUM_FIRST_ID,
    NUM_LAST_ID,
    N_NUM,
    PAD,
    SOS,
    Vocabulary,
    is_numeric_id,
    number_to_token_id,
    token_id_to_value,
)
from app.utils.errors import ModelError
from app.utils.models import NumericSentence

logger = logging.getLogger(__name__)

N_NUMERIC = N_NUM + 1
# covariance eigenvalues are raised to this fraction of their mean before whitening
WHITEN_FLOOR = 1e-4


class DecoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: int = Field(64, ge=2)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    n_prefix: int = Field(4, ge=1)
    max_len: int = Field(128, ge=2)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    warmup_fraction: float = Field(0.05, ge=0, lt=1)
    min_lr_ratio: float = Field(0.05, ge=0, le=1)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    ordinal_all_tokens: bool = False


class TextDecoder(nn.Module):
    def __init__(self, vocab: Vocabulary, cfg: Optional[DecoderConfig] = None, d_in: Optional[int] = None, seed: int = 0):
        super().__init__()
        cfg = cfg or DecoderConfig()
        gen = torch.Generator().manual_seed(seed)
        d = cfg.d
        self.vocab, self.cfg = vocab, cfg
        self.d_in = d_in or d
        self.n_words = vocab.size - N_NUMERIC
        if self.n_words < 1 or vocab.id_at(self.n_words) != NUM_FIRST_ID:
            raise ModelError("The decoder vocabulary must end with the numeric block")
        hidden = cfg.n_prefix * d
        self.register_buffer("prefix_mean", torch.zeros(self.d_in, dtype=DTYPE))
        self.register_buffer("prefix_whitening", torch.eye(self.d_in, dtype=DTYPE))
        self.prefix_w1 = nn.Parameter(torch.randn(self.d_in, hidden, generator=gen, dtype=DTYPE) * self.d_in ** -0.5)
        self.prefix_b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.prefix_w2 = nn.Parameter(torch.randn(hidden, cfg.n_prefix * d, generator=gen, dtype=DTYPE) * hidden ** -0.5)
        self.prefix_b2 = nn.Parameter(torch.zeros(cfg.n_prefix * d, dtype=DTYPE))
        self.token_embedding = nn.Parameter(torch.randn(vocab.size, d, generator=gen, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.n_heads, cfg.n_layers, gen) for _ in range(cfg.n_layers))
        self.ln_final_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln_final_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.head = nn.Parameter(torch.randn(d, self.n_words, generator=gen, dtype=DTYPE) * d ** -0.5)
        self.head_b = nn.Parameter(torch.zeros(self.n_words, dtype=DTYPE))
        self.value_w = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.value_b = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        self.gate_w = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.gate_b = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        self.log_sharpness = nn.Parameter(torch.full((1,), math.log(2.0), dtype=DTYPE))
        centers = [token_id_to_value(t) for t in range(NUM_FIRST_ID, NUM_LAST_ID + 1)]
        self.register_buffer("centers", torch.tensor(centers, dtype=DTYPE), persistent=False)
        self.register_buffer("pe", sinusoidal_encoding(cfg.n_prefix + cfg.max_len + 1, d), persistent=False)
        self.register_buffer("public_ids", torch.tensor(vocab.dense_ids, dtype=torch.long), persistent=False)
        self.sos_index = vocab.index(vocab.token_id(SOS))
        self.eos_index = vocab.index(EOS_ID)

    def dense(self, ids: Sequence[int]) -> torch.Tensor:
        return torch.tensor([self.vocab.index(int(t)) for t in ids], dtype=torch.long)

    @torch.no_grad()
    def fit_whitening(self, prefixes: torch.Tensor) -> None:
        """Centering and whitening from the training prefixes (identity scaling
        for fewer than two of them)."""
        prefixes = prefixes.to(DTYPE).reshape(-1, self.d_in)
        if prefixes.shape[0] == 0:
            raise ModelError("Cannot fit prefix whitening without prefixes")
        mean = prefixes.mean(dim=0)
        whitening = torch.eye(self.d_in, dtype=DTYPE)
        if prefixes.shape[0] > 1:
            centered = prefixes - mean
            eigvals, eigvecs = torch.linalg.eigh(centered.T @ centered / (prefixes.shape[0] - 1))
            level = float(eigvals.clamp_min(0.0).mean())
            if level > 0:
                floored = eigvals.clamp_min(WHITEN_FLOOR * level)
                whitening = eigvecs @ torch.diag(floored.rsqrt()) @ eigvecs.T
            else:
                logger.warning("Training prefixes are identical; prefix whitening only centers")
        self.prefix_mean.copy_(mean)
        self.prefix_whitening.copy_(whitening)

    def prefix_tokens(self, prefix: torch.Tensor) -> torch.Tensor:
        """(B, d_in) F^num -> (B, n_prefix, d)."""
        if prefix.dim() != 2 or prefix.shape[-1] != self.d_in:
            raise ModelError(f"Decoder prefix must have dim {self.d_in}, got {tuple(prefix.shape)}")
        z = ops.matmul(prefix - self.prefix_mean, self.prefix_whitening)
        hidden = ops.gelu(ops.matmul(z, self.prefix_w1) + self.prefix_b1)
        out = ops.matmul(hidden, self.prefix_w2) + self.prefix_b2
        return out.reshape(prefix.shape[0], self.cfg.n_prefix, self.cfg.d)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        """Final hidden states (..., d) -> logits over the dense vocabulary."""
        words = ops.matmul(h, self.head) + self.head_b
        value = ops.matmul(h, self.value_w.unsqueeze(-1)) + self.value_b
        gate = ops.matmul(h, self.gate_w.unsqueeze(-1)) + self.gate_b
        numbers = gate - self.log_sharpness.exp() * (self.centers - value) ** 2
        return ops.concat([words, numbers], dim=-1, node="decoder_logits")

    def forward(self, prefix: torch.Tensor, dense_inputs: torch.Tensor) -> torch.Tensor:
        """prefix (B, d_in), dense_inputs (B, T) -> logits (B, T, vocab.size)."""
        n_prefix = self.cfg.n_prefix
        p = self.prefix_tokens(prefix)
        x = ops.concat([p, ops.embedding_lookup(self.token_embedding, dense_inputs)], dim=1, node="decoder_input")
        length = x.shape[1]
        x = ops.add(x, self.pe[:length])
        allowed = causal_mask(length, prefix=n_prefix)
        for block in self.blocks:
            x = block(x, allowed)
        return self.logits(ops.layer_norm(x[:, n_prefix:], self.ln_final_w, self.ln_final_b))


# --- targets ---

def target_ids(sentence: NumericSentence, vocab: Vocabulary, stats: NormalizationStats) -> List[int]:
    """Public token ids the decoder should emit for a sentence, <eos> last."""
    ids = []
    for item in tokenize(sentence, vocab, stats).items:
        if item.kind is ItemKind.WORD:
            ids.append(item.token_id)
        elif item.kind is ItemKind.IS:
            ids.append(vocab.token_id("is"))
        else:
            ids.append(number_to_token_id(item.value))
    return ids + [EOS_ID]


def prefix_embeddings(
    corpus: Sequence[NumericSentence], encoder: FrozenTextEncoder, stats: NormalizationStats, chunk: int = 256
) -> torch.Tensor:
    """F^num (N, d) for every sentence, computed with the frozen text encoder."""
    seqs = [tokenize(s, encoder.vocab, stats) for s in corpus]
    out = []
    with torch.no_grad():
        for start in range(0, len(seqs), chunk):
            out.append(embed_sequences(seqs[start : start + chunk], encoder))
    return torch.cat(out) if out else torch.zeros(0, encoder.d, dtype=DTYPE)


def _batch_targets(model: TextDecoder, targets: Sequence[List[int]]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Dense inputs (<sos> + targets[:-1]), public targets and a validity mask, right-padded."""
    vocab = model.vocab
    pad = vocab.token_id(PAD)
    length = max(len(t) for t in targets)
    inputs = torch.full((len(targets), length), vocab.index(pad), dtype=torch.long)
    public = torch.full((len(targets), length), pad, dtype=torch.long)
    mask = torch.zeros(len(targets), length, dtype=torch.bool)
    for b, t in enumerate(targets):
        inputs[b, 0] = model.sos_index
        inputs[b, 1 : len(t)] = model.dense(t[:-1])
        public[b, : len(t)] = torch.tensor(t, dtype=torch.long)
        mask[b, : len(t)] = True
    return inputs, public, mask


def decoder_loss(logits: torch.Tensor, public: torch.Tensor, mask: torch.Tensor, model: TextDecoder) -> torch.Tensor:
    """Mean CE over target positions plus the ordinal term on numeric positions
    (ordinal weighting on every position when ``ordinal_all_tokens``)."""
    vocab = model.vocab
    if model.cfg.ordinal_all_tokens:
        return ops.mean(ordinal_ce(logits[mask], public[mask], vocab, reduction="none"))
    ce = ops.mean(token_cross_entropy(logits[mask], public[mask], vocab))
    numeric = mask & (public >= NUM_FIRST_ID)
    if not numeric.any():
        return ce
    return ops.add(ce, ordinal_ce(logits[numeric], public[numeric], vocab))


def lr_schedule(cfg: DecoderConfig, total_steps: int) -> Callable[[int], float]:
    """Step -> learning rate: linear warmup over ``warmup_fraction`` of the
    steps, then cosine decay from ``lr`` down to ``min_lr_ratio * lr``."""
    warmup = max(1, round(cfg.warmup_fraction * total_steps)) if cfg.warmup_fraction > 0 else 0
    floor = cfg.min_lr_ratio * cfg.lr

    def lr_at(step: int) -> float:
        if step < warmup:
            return cfg.lr * (step + 1) / warmup
        progress = min(1.0, (step - warmup) / max(1, total_steps - warmup - 1))
        return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return lr_at


def train_decoder(
    corpus: Sequence[NumericSentence],
    encoder: FrozenTextEncoder,
    stats: NormalizationStats,
    cfg: Optional[DecoderConfig] = None,
    seed: int = 0,
) -> Tuple[TextDecoder, List[float]]:
    """Teacher-forced prefix-LM training. Returns the model and per-epoch mean losses."""
    if not corpus:
        raise ModelError("Cannot train the decoder on an empty corpus")
    if not encoder.frozen:
        raise ModelError("Decoder training expects a frozen text encoder")
    cfg = cfg or DecoderConfig(d=encoder.d)
    if cfg.max_len < max(len(target_ids(s, encoder.vocab, stats)) for s in corpus):
        raise ModelError(f"Decoder max_len {cfg.max_len} is shorter than the longest target")
    model = TextDecoder(encoder.vocab, cfg, d_in=encoder.d, seed=seed)
    prefixes = prefix_embeddings(corpus, encoder, stats)
    model.fit_whitening(prefixes)
    targets = [target_ids(s, encoder.vocab, stats) for s in corpus]
    params = trainable(model.named_parameters())
    state = OptimizerState(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    schedule = lr_schedule(cfg, cfg.epochs * math.ceil(len(corpus) / cfg.batch_size))
    gen = torch.Generator().manual_seed(seed)
    curve: List[float] = []
    logger.info(f"Training decoder on {len(corpus)} sentences for {cfg.epochs} epochs (seed={seed})")
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(corpus), generator=gen).tolist()
        total, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            inputs, public, mask = _batch_targets(model, [targets[i] for i in idx])
            logits = model(prefixes[idx], inputs)
            loss = decoder_loss(logits, public, mask, model)
            state.set_lr(schedule(state.step_count))
            state.step(named_gradients(loss, params))
            total += loss.item()
            n_batches += 1
        curve.append(total / n_batches)
        logger.debug(f"decoder epoch {epoch + 1}/{cfg.epochs} loss={curve[-1]:.6f} lr={state.lr:.2e}")
    return model, curve


# --- decoding ---

@dataclass(frozen=True)
class DecodeResult:
    ids: Tuple[int, ...]
    truncated: bool

    @property
    def values(self) -> List[float]:
        return [token_id_to_value(t) for t in self.ids if is_numeric_id(t)]


@torch.no_grad()
def decode_batch(model: TextDecoder, prefixes: torch.Tensor, max_len: Optional[int] = None) -> List[DecodeResult]:
    """Greedy generation for a batch of prefixes (N, d_in). Rows stop at their
    own <eos>; rows still open at ``max_len`` are cut and flagged."""
    max_len = max_len or model.cfg.max_len
    prefixes = prefixes.to(DTYPE).reshape(-1, model.d_in)
    n = prefixes.shape[0]
    if n == 0:
        return []
    dense = torch.full((n, 1), model.sos_index, dtype=torch.long)
    out: List[List[int]] = [[] for _ in range(n)]
    done = [False] * n
    for _ in range(max_len):
        nxt = model(prefixes, dense)[:, -1].argmax(dim=-1)
        for row, index in enumerate(nxt.tolist()):
            if done[row]:
                continue
            if index == model.eos_index:
                done[row] = True
            else:
                out[row].append(int(model.public_ids[index]))
        if all(done):
            break
        dense = torch.cat([dense, nxt.unsqueeze(1)], dim=1)
    open_rows = done.count(False)
    if open_rows:
        logger.warning(f"Decoding reached max_len={max_len} without <eos> for {open_rows} of {n} prefixes")
    return [DecodeResult(tuple(ids), truncated=not finished) for ids, finished in zip(out, done)]


def decode(model: TextDecoder, prefix: torch.Tensor, max_len: Optional[int] = None) -> DecodeResult:
    """Greedy generation from <sos> until <eos>; cut and flagged at ``max_len``."""
    return decode_batch(model, prefix.reshape(1, -1), max_len)[0]


def detokenize_ids(
    ids: Sequence[int],
    vocab: Vocabulary,
    stats: Optional[NormalizationStats] = None,
) -> str:
    """Sentence text for decoded ids. With ``stats`` each number is mapped back
    to raw units using the parameter named by its clause; otherwise the
    normalized bucket center is printed."""
    index = {d.description.lower(): pid for pid, d in load_parameter_defs().items()}
    words: List[str] = []
    clause: List[str] = []
    for tok in ids:
        if is_numeric_id(tok):
            value = token_id_to_value(tok)
            if stats is not None:
                head = " ".join(clause)
                description = head[: -len(" is")] if head.endswith(" is") else head
                pid = index.get(description)
                if pid is not None and pid in stats.mean:
                    value = denormalize_value(value, stats, pid)
            text = format_value(value)
        else:
            text = vocab.token(tok)
        words.append(text)
        clause = [] if text in (",", ".") else clause + [text]
    sentence = " ".join(words).replace(" ,", ",").replace(" .", ".")
    return sentence[:1].upper() + sentence[1:]


def token_fidelity(decoded: Sequence[int], expected: Sequence[int], max_bucket_error: int = 2) -> bool:
    """Same word tokens in the same places, numbers within ``max_bucket_error`` buckets."""
    expected = [t for t in expected if t != EOS_ID]
    if len(decoded) != len(expected):
        return False
    for got, want in zip(decoded, expected):
        if is_numeric_id(want):
            if not is_numeric_id(got) or abs(got - want) > max_bucket_error:
                return False
        elif got != want:
            return False
    return True


def decoder_fidelity(
    model: TextDecoder,
    sentences: Sequence[NumericSentence],
    encoder: FrozenTextEncoder,
    stats: NormalizationStats,
    max_bucket_error: int = 2,
    chunk: int = 256,
) -> float:
    """Fraction of sentences whose decode(encode(s)) passes token_fidelity."""
    if not sentences:
        raise ModelError("No sentences to evaluate")
    prefixes = prefix_embeddings(sentences, encoder, stats)
    hits = 0
    for start in range(0, len(sentences), chunk):
        results = decode_batch(model, prefixes[start : start + chunk])
        for s, result in zip(sentences[start : start + chunk], results):
            hits += token_fidelity(result.ids, target_ids(s, encoder.vocab, stats), max_bucket_error)
    return hits / len(sentences)


# --- class interpretation ---

@dataclass
class EmbeddingBank:
    """Append-only (F^num, P^num, sentence) store."""

    features: List[torch.Tensor] = field(default_factory=list)
    projections: List[torch.Tensor] = field(default_factory=list)
    sentences: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sentences)

    def append(self, f_num: torch.Tensor, p_num: torch.Tensor, sentence: str) -> None:
        self.features.append(f_num.detach().to(DTYPE))
        self.projections.append(ops.l2_normalize(p_num.detach().to(DTYPE)))
        self.sentences.append(sentence)

    def extend(self, f_num: torch.Tensor, p_num: torch.Tensor, sentences: Sequence[str]) -> None:
        for f, p, s in zip(f_num, p_num, sentences):
            self.append(f, p, s)

    def matrices(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.sentences:
            raise ModelError("Embedding bank is empty")
        return torch.stack(self.features), torch.stack(self.projections)


@dataclass(frozen=True)
class Interpretation:
    weights: torch.Tensor
    feature: torch.Tensor
    decoded: DecodeResult
    sentence: str


def interpolation_weights(p_class: torch.Tensor, bank: EmbeddingBank, tau_interp: float = 0.1) -> torch.Tensor:
    _, projections = bank.matrices()
    cos = ops.cosine_similarity(p_class.to(DTYPE).unsqueeze(0), projections)
    return ops.softmax(cos / tau_interp, dim=-1)


@torch.no_grad()
def interpret_class(
    f_t: torch.Tensor,
    bank: EmbeddingBank,
    heads,
    model: TextDecoder,
    tau_interp: float = 0.1,
    stats: Optional[NormalizationStats] = None,
) -> Interpretation:
    """Decodes the softmax(cos / tau_interp)-weighted mix of bank F^num for one class."""
    features, _ = bank.matrices()
    weights = interpolation_weights(heads.text(f_t.to(DTYPE)), bank, tau_interp)
    feature = weights @ features
    result = decode(model, feature)
    return Interpretation(weights, feature, result, detokenize_ids(result.ids, model.vocab, stats))


def interpret_classes(
    f_t: torch.Tensor, bank: EmbeddingBank, heads, model: TextDecoder, class_names: Sequence[str], **kwargs
) -> Dict[str, List[str]]:
    """class name -> decoded sentence list, the shape of the interpretation report."""
    return {name: [interpret_class(f_t[i], bank, heads, model, **kwargs).sentence] for i, name in enumerate(class_names)}
