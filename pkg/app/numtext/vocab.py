# app/numtext/vocab.py
"""Closed word-level vocabulary with the numeric token-id block above [EOS]."""

import logging
import os
import re
from functools import lru_cache
from typing import Dict, Iterable, List, Optional

from app.diffmath.ops import LAYER_NORM_RANGE
from app.gait.parameters import load_parameter_defs
from app.utils.errors import NumTextError, OutOfVocabularyError, ValueOutOfRangeError

logger = logging.getLogger(__name__)

EOS_ID = 49407
N_NUM = 200
NUM_FIRST_ID = EOS_ID + 1  # +1 keeps scale 0 from colliding with [EOS]
NUM_LAST_ID = NUM_FIRST_ID + N_NUM
BUCKET_WIDTH = 2 * LAYER_NORM_RANGE / N_NUM

SOS = "<sos>"
IS = "<is>"
PAD = "<pad>"
EOS = "<eos>"
SPECIALS = (SOS, IS, PAD)
PUNCTUATION = (",", ".")
DIGITS = tuple("0123456789") + ("-",)

_WORD = re.compile(r"[a-z]+(?:[-'][a-z]+)*")


def split_words(text: str) -> List[str]:
    """Whitespace split with trailing ',' / '.' peeled off as their own tokens."""
    tokens: List[str] = []
    for piece in text.strip().lower().split():
        tail = []
        while len(piece) > 1 and piece[-1] in PUNCTUATION:
            tail.insert(0, piece[-1])
            piece = piece[:-1]
        tokens.append(piece)
        tokens.extend(tail)
    return tokens


def prose_words(text: str) -> List[str]:
    """Alphabetic words of free text (class descriptions), punctuation dropped."""
    return _WORD.findall(text.lower())


def number_to_token_id(v_norm: float) -> int:
    """Linear map of [-2.5, 2.5] onto buckets 0..N_NUM (round half up), offset above [EOS]."""
    if not -LAYER_NORM_RANGE <= v_norm <= LAYER_NORM_RANGE:
        raise ValueOutOfRangeError(f"Normalized value {v_norm} outside [-2.5, 2.5]; normalize first")
    bucket = int((v_norm + LAYER_NORM_RANGE) / BUCKET_WIDTH + 0.5)
    return NUM_FIRST_ID + min(bucket, N_NUM)


def token_id_to_value(tok: int) -> float:
    """Bucket center of a numeric token id."""
    if not NUM_FIRST_ID <= tok <= NUM_LAST_ID:
        raise NumTextError(f"Token id {tok} is not numeric")
    return -LAYER_NORM_RANGE + (tok - NUM_FIRST_ID) * BUCKET_WIDTH


def is_numeric_id(tok: int) -> bool:
    return NUM_FIRST_ID <= tok <= NUM_LAST_ID


class Vocabulary:
    """token -> id over words, specials, [EOS] and the numeric block.

    Public ids keep the [EOS]=49407 arithmetic; ``index`` gives the dense row
    (0..size-1) used by embedding tables and output heads.
    """

    def __init__(self, words: Iterable[str]):
        words = sorted(set(words) - set(SPECIALS) - {EOS})
        self._token_to_id: Dict[str, int] = {w: i for i, w in enumerate(words)}
        for offset, special in enumerate(SPECIALS):
            self._token_to_id[special] = len(words) + offset
        self._token_to_id[EOS] = EOS_ID
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}
        self._dense_ids: List[int] = sorted(self._id_to_token) + list(range(NUM_FIRST_ID, NUM_LAST_ID + 1))
        self._id_to_index = {tok: i for i, tok in enumerate(self._dense_ids)}
        if len(self._id_to_index) != len(self._dense_ids):
            raise NumTextError("Vocabulary ids are not unique")

    # --- construction ---
    @classmethod
    def build(cls, extra_texts: Iterable[str] = ()) -> "Vocabulary":
        words = set(PUNCTUATION) | set(DIGITS) | {"is"}
        for definition in load_parameter_defs().values():
            words.update(split_words(definition.description))
            if definition.unit:
                words.add(definition.unit)
        for text in extra_texts:
            words.update(prose_words(text))
        return cls(words)

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._dense_ids:
                if tok in self._id_to_token:
                    f.write(f"{self._id_to_token[tok]}\t{tok}\n")
        logger.debug(f"Vocabulary of {self.size} entries saved to {path}")
        return path

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            pairs = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        vocab = cls(tok for tok, _ in pairs)
        for tok, tid in pairs:
            if vocab.token_id(tok) != int(tid):
                raise NumTextError(f"Vocabulary file {path} disagrees with construction at '{tok}'")
        return vocab

    # --- lookups ---
    @property
    def size(self) -> int:
        return len(self._dense_ids)

    @property
    def max_id(self) -> int:
        return NUM_LAST_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_id(self, token: str) -> int:
        if token not in self._token_to_id:
            raise OutOfVocabularyError(token)
        return self._token_to_id[token]

    def token(self, tok: int) -> str:
        if is_numeric_id(tok):
            return f"<num:{tok - NUM_FIRST_ID}>"
        return self._id_to_token[tok]

    def index(self, tok: int) -> int:
        return self._id_to_index[tok]

    def id_at(self, index: int) -> int:
        return self._dense_ids[index]

    @property
    def dense_ids(self) -> List[int]:
        return list(self._dense_ids)

    def words(self) -> List[str]:
        return [t for t, i in self._token_to_id.items() if i < EOS_ID and t not in SPECIALS]


@lru_cache(maxsize=None)
def default_vocabulary(extra: Optional[tuple] = None) -> Vocabulary:
    """Vocabulary over the parameter table plus every shipped class-knowledge text."""
    from app.models.knowledge import all_knowledge_texts

    return Vocabulary.build(all_knowledge_texts() + (list(extra) if extra else []))
