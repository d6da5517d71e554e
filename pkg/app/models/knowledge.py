# app/models/knowledge.py
"""Per-task class knowledge (names and descriptions) and TF-IDF keywords."""

import json
import logging
import math
import os
from collections import Counter
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.numtext.vocab import prose_words
from app.utils.errors import ConfigError
from app.utils.models import ClassKnowledge

logger = logging.getLogger(__name__)

KNOWLEDGE_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "knowledge")
KNOWLEDGE_FORMAT_VERSION = 1
TASKS: Dict[str, int] = {"gait_scoring": 4, "dementia_group": 3}


def knowledge_path(task: str) -> str:
    return os.path.join(KNOWLEDGE_DIR, f"{task}.json")


@lru_cache(maxsize=None)
def _load(path: str) -> Tuple[ClassKnowledge, ...]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read class knowledge file {path}: {e}") from e
    version = payload.get("format_version")
    if version != KNOWLEDGE_FORMAT_VERSION:
        raise ConfigError(f"Unsupported class knowledge format {version} in {path}")
    try:
        classes = tuple(ClassKnowledge(**record) for record in payload["classes"])
    except (KeyError, TypeError, ValidationError) as e:
        raise ConfigError(f"Malformed class knowledge in {path}: {e}") from e
    logger.debug(f"Loaded {len(classes)} class descriptions from {path}")
    return classes


def load_class_knowledge(task: str, path: Optional[str] = None, k: int = 5) -> List[ClassKnowledge]:
    """Class records in label order, with keywords filled in where the file gives none."""
    if path is None:
        if task not in TASKS:
            raise ConfigError(f"Unknown task '{task}'; expected one of {sorted(TASKS)}")
        path = knowledge_path(task)
    classes = list(_load(path))
    if task in TASKS and len(classes) != TASKS[task]:
        raise ConfigError(f"Task '{task}' needs {TASKS[task]} classes, {path} has {len(classes)}")
    corpus = [c.description for c in classes]
    return [
        c if c.keywords else c.model_copy(update={"keywords": extract_keywords(c.description, k, corpus)})
        for c in classes
    ]


def all_knowledge_texts() -> List[str]:
    texts: List[str] = []
    for task in sorted(TASKS):
        for c in _load(knowledge_path(task)):
            texts.extend([c.name, c.description] + list(c.keywords or []))
    return texts


def extract_keywords(desc: str, k: int = 5, corpus: Optional[Sequence[str]] = None) -> List[str]:
    """Top-k words of ``desc`` by tf-idf over ``corpus`` (defaults to just ``desc``).

    tf = count / length, idf = ln(N / df); ties go to the lexicographically
    smaller word. A word present in every document scores 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    words = prose_words(desc)
    if not words:
        return []
    docs = [set(prose_words(text)) for text in (corpus if corpus else [desc])]
    n_docs = len(docs)
    counts = Counter(words)
    scores = {}
    for word, count in counts.items():
        df = sum(1 for doc in docs if word in doc) or 1
        scores[word] = (count / len(words)) * math.log(n_docs / df)
    ranked = sorted(scores, key=lambda w: (-scores[w], w))
    return ranked[:k]
