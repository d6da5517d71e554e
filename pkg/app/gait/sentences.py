# app/gait/sentences.py
"""Rendering and parsing of gait-parameter sentences.

Grammar (EBNF, also in docs/formats.md):

    sentence    = clause , { ", " , clause } , "." ;
    clause      = description , " is " , number , [ " " , unit ] ;
    description = first clause: table text; later clauses: table text lower-cased ;
    number      = [ "-" ] , digit , { digit } , [ "." , digit , [ digit ] , [ digit ] ] ;

Descriptions may themselves contain the word "is" (e.g. "foot is off the
ground"), so a clause is split at its last " is ".
"""

import logging
import re
from typing import Dict, List, Mapping, Optional, Tuple, Union

from app.gait.parameters import load_parameter_defs
from app.utils.errors import SentenceParseError
from app.utils.models import GaitParameterDef, GaitParameterSet, NumericSentence, ParameterCombination

logger = logging.getLogger(__name__)

CLAUSE_SEPARATOR = ", "
TERMINATOR = "."
NUMBER_PATTERN = re.compile(r"^-?\d+(\.\d{1,3})?$")


def format_value(v: float) -> str:
    """Up to three fractional digits, trailing zeros trimmed, no negative zero."""
    text = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def _clause(definition: GaitParameterDef, value: float, first: bool) -> str:
    description = definition.description if first else definition.description.lower()
    clause = f"{description} is {format_value(value)}"
    return f"{clause} {definition.unit}" if definition.unit else clause


def render_sentence(
    combo: ParameterCombination,
    values: Union[Mapping[int, float], GaitParameterSet],
    defs: Optional[Dict[int, GaitParameterDef]] = None,
) -> str:
    defs = defs or load_parameter_defs()
    raw = values.values if isinstance(values, GaitParameterSet) else values
    missing = [pid for pid in combo.ids if pid not in raw]
    if missing:
        raise SentenceParseError(f"No value for parameter ids {missing}")
    clauses = [_clause(defs[pid], raw[pid], i == 0) for i, pid in enumerate(combo.ids)]
    return CLAUSE_SEPARATOR.join(clauses) + TERMINATOR


def make_sentence(
    combo: ParameterCombination, values: GaitParameterSet, defs: Optional[Dict[int, GaitParameterDef]] = None
) -> NumericSentence:
    text = render_sentence(combo, values, defs)
    return NumericSentence(
        text=text,
        combination=combo,
        values={pid: values.values[pid] for pid in combo.ids},
        label=values.label,
    )


def _description_index(defs: Dict[int, GaitParameterDef]) -> Dict[str, int]:
    return {d.description.lower(): pid for pid, d in defs.items()}


def split_clauses(text: str) -> List[str]:
    stripped = text.strip()
    if not stripped:
        raise SentenceParseError("Empty sentence")
    if not stripped.endswith(TERMINATOR):
        raise SentenceParseError("Sentence must end with '.'")
    return stripped[: -len(TERMINATOR)].split(CLAUSE_SEPARATOR)


def parse_clause(clause: str, index: int, defs: Dict[int, GaitParameterDef]) -> Tuple[int, float]:
    """Returns (parameter id, value) for one clause."""
    description, sep, rest = clause.rpartition(" is ")
    if not sep:
        raise SentenceParseError(f"Clause '{clause}' has no ' is '", index)
    pid = _description_index(defs).get(description.strip().lower())
    if pid is None:
        raise SentenceParseError(f"Unknown parameter description '{description}'", index)
    parts = rest.split(" ")
    number, unit = parts[0], " ".join(parts[1:])
    if not NUMBER_PATTERN.match(number):
        raise SentenceParseError(f"Malformed number '{number}'", index)
    if unit != defs[pid].unit:
        raise SentenceParseError(f"Unit '{unit}' does not match '{defs[pid].unit}' for parameter {pid}", index)
    return pid, float(number)


def parse_sentence(
    text: str, defs: Optional[Dict[int, GaitParameterDef]] = None, size: Optional[int] = 4
) -> Tuple[ParameterCombination, Dict[int, float]]:
    """Inverse of render_sentence; clause order does not matter."""
    defs = defs or load_parameter_defs()
    clauses = split_clauses(text)
    if size is not None and len(clauses) != size:
        raise SentenceParseError(f"Expected {size} clauses, found {len(clauses)}", len(clauses) - 1)
    values: Dict[int, float] = {}
    for i, clause in enumerate(clauses):
        pid, value = parse_clause(clause, i, defs)
        if pid in values:
            raise SentenceParseError(f"Parameter {pid} appears twice", i)
        values[pid] = value
    return ParameterCombination(ids=tuple(sorted(values))), values
