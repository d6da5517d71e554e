# app/numtext/embedding.py
"""Numeracy-enhanced tokenization and embedding.

Words map to word ids, the conjunction "is" before a number becomes the
[IS] marker, and each number becomes a NUM item carrying its normalized value.
Before the frozen encoder, items embed as

    word  -> token_embedding[id] + PE_t
    IS    -> [IS] + PE_t
    NUM   -> value * [NUM] + PE_t

and the sequence is closed with [EOS], whose output is the sequence summary.
"""

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.diffmath import DTYPE
from app.diffmath import ops
from app.diffmath.ops import LAYER_NORM_RANGE
from app.gait.parameters import NormalizationStats, normalize_value
from app.gait.sentences import format_value
from app.models.transformer import FrozenTextEncoder
from app.numtext.vocab import EOS_ID, Vocabulary, split_words
from app.utils.errors import NumTextError, SequenceTooLongError, ValueOutOfRangeError
from app.utils.models import NumericSentence

logger = logging.getLogger(__name__)

SLOT = "[value]"
_NUMBER = re.compile(r"^-?\d+(\.\d+)?$")


class ItemKind(str, Enum):
    WORD = "word"
    IS = "is"
    NUM = "num"


@dataclass(frozen=True)
class SequenceItem:
    kind: ItemKind
    token_id: Optional[int] = None
    value: Optional[float] = None


@dataclass(frozen=True)
class NumericTokenSequence:
    items: Tuple[SequenceItem, ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def values(self) -> List[float]:
        return [item.value for item in self.items if item.kind is ItemKind.NUM]


def _is_number(token: str) -> bool:
    return token == SLOT or bool(_NUMBER.match(token))


def tokenize_text(text: str, vocab: Vocabulary, numbers: Optional[Sequence[float]] = None) -> NumericTokenSequence:
    """Tokenizes free text. Numeric literals (and the "[value]" slot) become NUM
    items whose values are taken in order from ``numbers`` when given, else
    parsed from the literal; "is" directly before a number becomes [IS]."""
    words = split_words(text)
    supplied = list(numbers) if numbers is not None else None
    items: List[SequenceItem] = []
    n_seen = 0
    for i, word in enumerate(words):
        if _is_number(word):
            if supplied is not None:
                if n_seen >= len(supplied):
                    raise NumTextError(f"Text has more numbers than the {len(supplied)} supplied values: {text!r}")
                value = supplied[n_seen]
            elif word == SLOT:
                raise ValueOutOfRangeError("A '[value]' slot needs a supplied number")
            else:
                value = float(word)
            if not -LAYER_NORM_RANGE <= value <= LAYER_NORM_RANGE:
                raise ValueOutOfRangeError(f"NUM value {value} outside [-2.5, 2.5]")
            items.append(SequenceItem(ItemKind.NUM, value=float(value)))
            n_seen += 1
        elif word == "is" and i + 1 < len(words) and _is_number(words[i + 1]):
            items.append(SequenceItem(ItemKind.IS))
        else:
            items.append(SequenceItem(ItemKind.WORD, token_id=vocab.token_id(word)))
    return NumericTokenSequence(tuple(items))


def tokenize(sentence: NumericSentence, vocab: Vocabulary, stats: NormalizationStats) -> NumericTokenSequence:
    """Tokenizes a rendered gait sentence with values normalized per parameter."""
    normalized = [normalize_value(sentence.values[pid], stats, pid) for pid in sentence.combination.ids]
    return tokenize_text(sentence.text, vocab, normalized)


def detokenize(seq: NumericTokenSequence, vocab: Vocabulary) -> List[str]:
    """Word sequence with "is" for [IS] and the value text for NUM items."""
    out = []
    for item in seq.items:
        if item.kind is ItemKind.WORD:
            out.append(vocab.token(item.token_id))
        elif item.kind is ItemKind.IS:
            out.append("is")
        else:
            out.append(format_value(item.value))
    return out


def embed_items(seq: NumericTokenSequence, encoder: FrozenTextEncoder) -> torch.Tensor:
    """(len(seq) + 1, d) pre-encoder embeddings, [EOS] appended."""
    length = len(seq) + 1
    if length > encoder.max_len:
        raise SequenceTooLongError(length, encoder.max_len)
    basis = encoder.basis
    word_ids = [item.token_id if item.kind is ItemKind.WORD else EOS_ID for item in seq.items] + [EOS_ID]
    words = encoder.embed_ids(torch.tensor(word_ids, dtype=torch.long))
    rows = []
    for t, item in enumerate(seq.items):
        if item.kind is ItemKind.WORD:
            rows.append(words[t])
        elif item.kind is ItemKind.IS:
            rows.append(basis.is_)
        else:
            rows.append(ops.scale(basis.num, item.value))
    rows.append(words[-1])
    return ops.add(torch.stack(rows), encoder.positions(length))


def embed_sequences(seqs: Sequence[NumericTokenSequence], encoder: FrozenTextEncoder) -> torch.Tensor:
    """(B, d) final-token representations, F^num for each sequence."""
    embedded = [embed_items(s, encoder) for s in seqs]
    lengths = torch.tensor([e.shape[0] for e in embedded], dtype=torch.long)
    batch = torch.zeros(len(embedded), int(lengths.max()), encoder.d, dtype=DTYPE)
    for b, e in enumerate(embedded):
        batch[b, : e.shape[0]] = e
    return encoder.pool_last(batch, lengths)


def embed_sequence(seq: NumericTokenSequence, encoder: FrozenTextEncoder) -> torch.Tensor:
    return embed_sequences([seq], encoder)[0]


def _similarity(features: torch.Tensor) -> np.ndarray:
    unit = ops.l2_normalize(features)
    sim = (unit @ unit.T).numpy()
    return (sim + sim.T) / 2.0


def similarity_map(template: str, grid: Sequence[float], vocab: Vocabulary, encoder: FrozenTextEncoder) -> np.ndarray:
    """M[i][j] = cos(F^num(grid[i]), F^num(grid[j])) for a one-slot template."""
    if list(grid) != sorted(grid):
        raise ValueError("grid must be sorted ascending")
    with torch.no_grad():
        seqs = [tokenize_text(template, vocab, [v]) for v in grid]
        return _similarity(embed_sequences(seqs, encoder))


def digit_similarity_map(template: str, grid: Sequence[float], vocab: Vocabulary, encoder: FrozenTextEncoder) -> np.ndarray:
    """Baseline: the value is spelled as digit tokens ("0", ".", "8", "4")."""
    if list(grid) != sorted(grid):
        raise ValueError("grid must be sorted ascending")
    with torch.no_grad():
        seqs = []
        for v in grid:
            spelled = " ".join(format_value(v))
            words = split_words(template.replace(SLOT, spelled))
            items = tuple(SequenceItem(ItemKind.WORD, token_id=vocab.token_id(w)) for w in words)
            seqs.append(NumericTokenSequence(items))
        return _similarity(embed_sequences(seqs, encoder))
