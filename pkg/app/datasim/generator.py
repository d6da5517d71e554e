# app/datasim/generator.py
"""Synthetic cohort standing in for recorded gait videos.

Generative model (documented in docs/formats.md):

* Each parameter has a healthy mean and spread (``BASELINE``). Class k shifts
  the means of the gait-relevant parameters by
  ``separability * (severity_k * EFFECT + 0.5 * r_k) * spread``, r_k a seeded
  standard-normal pattern (zero for class 0).
* A subject draws values around its class mean (0.5 spread); each video jitters
  the subject values (0.1 spread) and, with probability ``pairing_rate``, keeps
  them as its GaitParameterSet.
* Frame feature c at frame t is a sinusoid whose frequency follows cadence and
  amplitude follows step length of the channel's side, plus a second harmonic
  scaled by heel height, a left/right asymmetry term from the step-time
  difference, a double-support offset and Gaussian noise.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.gait.sentences import make_sentence
from app.utils.errors import DatasetError
from app.utils.models import GaitParameterSet, NumericSentence, ParameterCombination

logger = logging.getLogger(__name__)

# id -> (healthy mean, spread) in the parameter's unit
BASELINE: Dict[int, tuple] = {
    1: (1.5, 0.2), 2: (110.0, 8.0), 3: (0.02, 0.01), 4: (0.03, 0.015), 5: (0.02, 0.01),
    6: (0.55, 0.04), 7: (0.55, 0.04), 8: (0.8, 0.07), 9: (0.8, 0.07), 10: (1.1, 0.08),
    11: (1.1, 0.08), 12: (1.6, 0.14), 13: (1.6, 0.14), 14: (2.5, 0.5), 15: (2.5, 0.5),
    16: (38.0, 2.0), 17: (38.0, 2.0), 18: (0.42, 0.03), 19: (0.42, 0.03), 20: (38.0, 2.0),
    21: (38.0, 2.0), 22: (0.42, 0.03), 23: (0.42, 0.03), 24: (24.0, 3.0), 25: (24.0, 3.0),
    26: (0.26, 0.04), 27: (0.26, 0.04), 28: (6.0, 3.0), 29: (6.0, 3.0),
}

# per-severity-step shift, in spreads; parameters not listed carry no class signal
EFFECT: Dict[int, float] = {
    1: -1.5, 2: -1.0, 3: 0.8, 4: 0.8, 6: 1.0, 7: 1.0, 8: -1.2, 9: -1.2,
    14: -0.8, 15: -0.8, 24: 1.0, 25: 1.0, 26: 1.0, 27: 1.0,
}

SEVERITY = {"gait_scoring": (0, 1, 2, 3), "dementia_group": (0, 2, 1)}
SUBJECT_SPREAD = 0.5
VIDEO_SPREAD = 0.1

# frame-signal parameter ids per side: (step length, step time, heel height, double support %)
_LEFT = (9, 7, 14, 24)
_RIGHT = (8, 6, 15, 25)


class SimulationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    task: Literal["gait_scoring", "dementia_group"] = "gait_scoring"
    subjects_per_class: int = Field(20, ge=1)
    videos_per_subject: int = Field(2, ge=1)
    frames_per_video: int = Field(160, ge=1)
    f_in: int = Field(16, ge=1)
    separability: float = Field(1.0, ge=0)
    noise: float = Field(0.3, ge=0)
    pairing_rate: float = Field(0.8, ge=0, le=1)
    fps: float = Field(30.0, gt=0)
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(SEVERITY[self.task])

    @classmethod
    def from_experiment(cls, cfg) -> "SimulationConfig":
        return cls(
            task=cfg.task,
            subjects_per_class=cfg.subjects_per_class,
            videos_per_subject=cfg.videos_per_subject,
            frames_per_video=cfg.frames_per_video,
            f_in=cfg.f_in,
            separability=cfg.separability,
            noise=cfg.noise,
            pairing_rate=cfg.pairing_rate,
            seed=cfg.seed,
        )


@dataclass
class SyntheticVideo:
    video_id: str
    subject_id: str
    label: int
    frames: np.ndarray
    parameters: Optional[GaitParameterSet] = None

    @property
    def paired(self) -> bool:
        return self.parameters is not None

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class SyntheticSubject:
    subject_id: str
    label: int
    means: Dict[int, float]
    spreads: Dict[int, float]
    videos: List[SyntheticVideo] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    config: SimulationConfig
    subjects: List[SyntheticSubject]

    def videos(self, subject_ids: Optional[Sequence[str]] = None) -> List[SyntheticVideo]:
        wanted = None if subject_ids is None else set(subject_ids)
        return [v for s in self.subjects if wanted is None or s.subject_id in wanted for v in s.videos]

    def parameter_sets(self, subject_ids: Optional[Sequence[str]] = None) -> List[GaitParameterSet]:
        return [v.parameters for v in self.videos(subject_ids) if v.paired]

    @property
    def labels(self) -> Dict[str, int]:
        return {s.subject_id: s.label for s in self.subjects}


def class_means(cfg: SimulationConfig) -> List[Dict[int, float]]:
    """Per-class parameter means; identical for every class when separability is 0."""
    rng = np.random.default_rng([cfg.seed, 7])
    means = []
    for severity in SEVERITY[cfg.task]:
        pattern = rng.standard_normal(len(EFFECT)) if severity else np.zeros(len(EFFECT))
        shift = {pid: (severity * EFFECT[pid] + 0.5 * r) for pid, r in zip(EFFECT, pattern)}
        means.append(
            {
                pid: mean + cfg.separability * shift.get(pid, 0.0) * spread
                for pid, (mean, spread) in BASELINE.items()
            }
        )
    return means


def synthesize_frames(
    values: Dict[int, float], cfg: SimulationConfig, channels: Dict[str, np.ndarray], rng: np.random.Generator
) -> np.ndarray:
    """(frames_per_video, f_in) features driven by one set of gait parameters."""
    t = np.arange(cfg.frames_per_video, dtype=np.float64)[:, None]
    omega = 2.0 * math.pi * (values[2] / 120.0) / cfg.fps
    start_phase = rng.uniform(0.0, 2.0 * math.pi)
    side = channels["side"]  # 0 = left, 1 = right
    length = np.where(side == 0, values[_LEFT[0]], values[_RIGHT[0]]) / BASELINE[8][0]
    height = np.where(side == 0, values[_LEFT[2]], values[_RIGHT[2]]) / BASELINE[14][0]
    support = np.where(side == 0, values[_LEFT[3]], values[_RIGHT[3]]) / BASELINE[24][0]
    asym = (values[_RIGHT[1]] - values[_LEFT[1]]) / BASELINE[6][1] * np.where(side == 0, -1.0, 1.0)
    phase = channels["phase"] + math.pi * side + start_phase
    frames = (
        channels["gain"] * length * np.sin(omega * t + phase)
        + 0.3 * height * np.sin(2.0 * omega * t + channels["phase"])
        + 0.2 * asym * np.cos(omega * t + phase)
        + (support - 1.0)
        + cfg.noise * rng.standard_normal((cfg.frames_per_video, cfg.f_in))
    )
    return frames


def generate_dataset(cfg: SimulationConfig) -> SyntheticDataset:
    """Deterministic cohort for ``cfg.seed``: subjects in class order, each with
    ``videos_per_subject`` videos."""
    if cfg.n_classes < 1 or cfg.subjects_per_class < 1:
        raise DatasetError(f"Impossible simulation config: {cfg.n_classes} classes, {cfg.subjects_per_class} subjects/class")
    rng = np.random.default_rng(cfg.seed)
    channels = {
        "side": np.arange(cfg.f_in) % 2,
        "gain": rng.uniform(0.5, 1.5, cfg.f_in),
        "phase": rng.uniform(0.0, 2.0 * math.pi, cfg.f_in),
    }
    spreads = {pid: spread for pid, (_, spread) in BASELINE.items()}
    subjects: List[SyntheticSubject] = []
    for label, means in enumerate(class_means(cfg)):
        for _ in range(cfg.subjects_per_class):
            subject_id = f"s{len(subjects):03d}"
            center = {pid: means[pid] + SUBJECT_SPREAD * spreads[pid] * rng.standard_normal() for pid in BASELINE}
            subject = SyntheticSubject(subject_id, label, center, spreads)
            for v in range(cfg.videos_per_subject):
                values = {pid: center[pid] + VIDEO_SPREAD * spreads[pid] * rng.standard_normal() for pid in BASELINE}
                frames = synthesize_frames(values, cfg, channels, rng)
                paired = rng.uniform() < cfg.pairing_rate
                params = GaitParameterSet(subject_id=subject_id, label=label, values=values) if paired else None
                subject.videos.append(SyntheticVideo(f"{subject_id}_v{v}", subject_id, label, frames, params))
            subjects.append(subject)
    n_videos = sum(len(s.videos) for s in subjects)
    n_paired = sum(v.paired for s in subjects for v in s.videos)
    logger.info(
        f"Generated {len(subjects)} subjects, {n_videos} videos ({n_paired} paired), "
        f"task={cfg.task} separability={cfg.separability} seed={cfg.seed}"
    )
    return SyntheticDataset(cfg, subjects)


def build_sentences(
    sets: Sequence[GaitParameterSet],
    combinations: Sequence[ParameterCombination],
    per_set: int,
    seed: int = 0,
) -> List[NumericSentence]:
    """``per_set`` sentences per parameter set, each over a distinct seeded
    choice of combination (all of them when fewer are available)."""
    if not combinations:
        logger.warning("No parameter combinations available; no sentences built")
        return []
    rng = np.random.default_rng([seed, 11])
    sentences = []
    for params in sets:
        picks = rng.choice(len(combinations), size=min(per_set, len(combinations)), replace=False)
        sentences.extend(make_sentence(combinations[int(i)], params) for i in sorted(picks))
    return sentences


def sample_parameter_sets(cfg: SimulationConfig, n: int, seed: int = 0) -> List[GaitParameterSet]:
    """``n`` parameter sets from the cohort's generative model without frames:
    classes in turn, each set one subject draw plus one video jitter."""
    if n < 1:
        raise DatasetError(f"Cannot sample {n} parameter sets")
    rng = np.random.default_rng([seed, 13])
    means = class_means(cfg)
    sets = []
    for i in range(n):
        label = i % len(means)
        values = {
            pid: means[label][pid]
            + spread * (SUBJECT_SPREAD * rng.standard_normal() + VIDEO_SPREAD * rng.standard_normal())
            for pid, (_, spread) in BASELINE.items()
        }
        sets.append(GaitParameterSet(subject_id=f"p{i:04d}", label=label, values=values))
    logger.debug(f"Sampled {n} parameter sets for task={cfg.task} seed={seed}")
    return sets
