# app/utils/models.py
import math
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class GaitParameterDef(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=1, le=29)
    description: str
    unit: str = ""


class GaitParameterSet(BaseModel):
    subject_id: str
    label: int
    values: Dict[int, float]

    @field_validator("values")
    @classmethod
    def _finite(cls, values: Dict[int, float]) -> Dict[int, float]:
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite gait parameter values for ids {bad}")
        return values


class ParameterCombination(BaseModel):
    model_config = ConfigDict(frozen=True)

    ids: Tuple[int, ...]

    @field_validator("ids")
    @classmethod
    def _distinct_sorted(cls, ids: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(set(ids)) != len(ids):
            raise ValueError(f"parameter ids must be distinct: {ids}")
        if list(ids) != sorted(ids):
            raise ValueError(f"parameter ids must be sorted ascending: {ids}")
        return ids


class NumericSentence(BaseModel):
    text: str
    combination: ParameterCombination
    values: Dict[int, float]
    label: Optional[int] = None


class ClassKnowledge(BaseModel):
    name: str
    description: str = Field(min_length=1)
    keywords: Optional[List[str]] = None


class MetricsReport(BaseModel):
    n_classes: int
    accuracy: float
    macro_f1: float
    per_class_f1: List[float]
    confusion: List[List[int]]
    support: List[int]
    clip_accuracy: Optional[float] = None


class FoldReport(BaseModel):
    fold: int
    metrics: MetricsReport
    loss_curve: List[float]
    checkpoint: Optional[str] = None


class CVReport(BaseModel):
    variant: str
    config: Dict[str, Any]
    folds: List[FoldReport]
    mean_accuracy: float
    std_accuracy: float
    mean_macro_f1: float
    std_macro_f1: float


class RunRequest(BaseModel):
    """Body of POST /api/v1/runs: config overrides applied on top of the defaults."""

    overrides: Dict[str, Any] = Field(default_factory=dict)
    ablation: bool = False
