# app/gait/parameters.py
"""Gait parameter vocabulary, healthy-control normalization, correlations and
correlation-filtered parameter combinations."""

import csv
import logging
import math
import os
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from app.diffmath.ops import LAYER_NORM_RANGE
from app.utils.errors import GaitParameterError, UnknownParameterError, ZeroVarianceError
from app.utils.models import GaitParameterDef, GaitParameterSet, ParameterCombination

logger = logging.getLogger(__name__)

PARAMETER_TABLE = os.path.join(os.path.dirname(__file__), "data", "gait_parameters_v1.tsv")
PARAMETER_IDS = tuple(range(1, 30))


@lru_cache(maxsize=None)
def load_parameter_defs(path: str = PARAMETER_TABLE) -> Dict[int, GaitParameterDef]:
    """Reads the versioned id/description/unit table."""
    defs: Dict[int, GaitParameterDef] = {}
    with open(path, "r", encoding="utf-8") as f:
        rows = [line.rstrip("\n") for line in f if line.strip() and not line.startswith("#")]
    header, body = rows[0].split("\t"), rows[1:]
    if header != ["id", "description", "unit"]:
        raise GaitParameterError(f"Unexpected header in {path}: {header}")
    for line in body:
        cells = line.split("\t")
        pid, description = int(cells[0]), cells[1]
        unit = cells[2] if len(cells) > 2 else ""
        if pid in defs:
            raise GaitParameterError(f"Duplicate parameter id {pid} in {path}")
        defs[pid] = GaitParameterDef(id=pid, description=description, unit=unit)
    logger.debug(f"Loaded {len(defs)} gait parameter definitions from {path}")
    return defs


class NormalizationStats(BaseModel):
    """Healthy-control mean, spread and per-parameter scaling factor."""

    mean: Dict[int, float]
    sigma: Dict[int, float]
    scale: Dict[int, float]

    @model_validator(mode="after")
    def _check(self) -> "NormalizationStats":
        for pid, s in self.sigma.items():
            if not s > 0:
                raise ZeroVarianceError(f"sigma must be positive for parameter {pid}, got {s}")
        if set(self.mean) != set(self.sigma) or set(self.mean) != set(self.scale):
            raise GaitParameterError("mean, sigma and scale must cover the same parameter ids")
        return self


def fit_normalization(
    train: Sequence[GaitParameterSet], healthy_label: int = 0
) -> NormalizationStats:
    """Fits stats on the training split: healthy-class mean as zero reference,
    standard deviation over the split as sigma, and a scale that maps the
    farthest training value from the reference onto +/-2.5."""
    if not train:
        raise GaitParameterError("Cannot fit normalization on an empty split")
    healthy = [s for s in train if s.label == healthy_label]
    if not healthy:
        logger.warning(f"No healthy-label ({healthy_label}) rows in split; using all rows as reference")
        healthy = list(train)
    mean, sigma, scale = {}, {}, {}
    ids = sorted(set().union(*(s.values.keys() for s in train)))
    for pid in ids:
        values = np.array([s.values[pid] for s in train if pid in s.values])
        ref = np.array([s.values[pid] for s in healthy if pid in s.values])
        center = float(ref.mean()) if ref.size else float(values.mean())
        spread = float(values.std())
        if spread <= 0:
            logger.warning(f"Parameter {pid} is constant on the training split; skipped")
            continue
        reach = float(np.max(np.abs(values - center))) / spread
        mean[pid] = center
        sigma[pid] = spread
        scale[pid] = LAYER_NORM_RANGE / reach if reach > 0 else 1.0
    return NormalizationStats(mean=mean, sigma=sigma, scale=scale)


def normalize_value(v: float, stats: NormalizationStats, param_id: int) -> float:
    if param_id not in stats.mean:
        raise UnknownParameterError(param_id)
    z = stats.scale[param_id] * (v - stats.mean[param_id]) / stats.sigma[param_id]
    return min(LAYER_NORM_RANGE, max(-LAYER_NORM_RANGE, z))


def denormalize_value(v_norm: float, stats: NormalizationStats, param_id: int) -> float:
    if param_id not in stats.mean:
        raise UnknownParameterError(param_id)
    return stats.mean[param_id] + v_norm * stats.sigma[param_id] / stats.scale[param_id]


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation, clipped to [-1, 1]."""
    a, b = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise GaitParameterError(f"pearson needs two equal-length sequences of >= 2 values, got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise ZeroVarianceError("pearson is undefined for a constant sequence")
    return max(-1.0, min(1.0, float(da @ db) / (sa * sb)))


def usable_parameters(data: Sequence[GaitParameterSet]) -> List[int]:
    """Ids present in every row and non-constant across rows."""
    if not data:
        return []
    common = set(data[0].values)
    for row in data[1:]:
        common &= set(row.values)
    usable = []
    for pid in sorted(common):
        column = [row.values[pid] for row in data]
        if len(column) >= 2 and max(column) > min(column):
            usable.append(pid)
    return usable


def correlation_matrix(data: Sequence[GaitParameterSet], ids: Sequence[int]) -> np.ndarray:
    """Symmetric Pearson matrix with an exact unit diagonal."""
    columns = {pid: [row.values[pid] for row in data] for pid in ids}
    n = len(ids)
    corr = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            corr[i, j] = corr[j, i] = pearson(columns[ids[i]], columns[ids[j]])
    return corr


def select_combinations(
    data: Sequence[GaitParameterSet], size: int = 4, threshold: float = 0.4
) -> List[ParameterCombination]:
    """All size-subsets of usable parameters whose pairwise |r| <= threshold,
    in lexicographic id order."""
    if size < 2:
        raise GaitParameterError(f"combination size must be >= 2, got {size}")
    if len(data) < 2:
        raise GaitParameterError("at least two rows are needed to compute correlations")
    ids = usable_parameters(data)
    if len(ids) < size:
        logger.warning(f"Only {len(ids)} usable parameters for combinations of {size}")
        return []
    corr = correlation_matrix(data, ids)
    compatible = np.abs(corr) <= threshold
    found: List[ParameterCombination] = []

    def extend(chosen: List[int], start: int) -> None:
        if len(chosen) == size:
            found.append(ParameterCombination(ids=tuple(ids[i] for i in chosen)))
            return
        for k in range(start, len(ids) - (size - len(chosen)) + 1):
            if all(compatible[k, c] for c in chosen):
                extend(chosen + [k], k + 1)

    extend([], 0)
    logger.info(f"Selected {len(found)} combinations of {size} from {len(ids)} parameters (|r| <= {threshold})")
    return found


# --- tabular I/O ---

def write_parameter_table(path: str, rows: Iterable[GaitParameterSet], extra: Optional[Dict[str, List[str]]] = None) -> str:
    """Writes one row per set: subject_id,label,p1..p29 (empty cell = missing)."""
    rows = list(rows)
    extra = extra or {}
    header = ["subject_id", "label"] + list(extra) + [f"p{pid}" for pid in PARAMETER_IDS]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, row in enumerate(rows):
            cells = [row.subject_id, str(row.label)] + [extra[k][i] for k in extra]
            cells += [repr(float(row.values[pid])) if pid in row.values else "" for pid in PARAMETER_IDS]
            writer.writerow(cells)
    logger.debug(f"Wrote {len(rows)} gait parameter rows to {path}")
    return path


def read_parameter_table(path: str) -> List[Dict[str, object]]:
    """Reads rows written by write_parameter_table. Each result holds the
    GaitParameterSet under 'set' plus any extra columns by name."""
    out: List[Dict[str, object]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for line in reader:
            values = {
                pid: float(line[f"p{pid}"]) for pid in PARAMETER_IDS if line.get(f"p{pid}", "") != ""
            }
            record: Dict[str, object] = {
                k: v for k, v in line.items() if k not in ("subject_id", "label") and not (k.startswith("p") and k[1:].isdigit())
            }
            record["set"] = GaitParameterSet(subject_id=line["subject_id"], label=int(line["label"]), values=values)
            out.append(record)
    return out
