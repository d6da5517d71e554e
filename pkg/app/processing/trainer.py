# app/processing/trainer.py
"""One cross-validation fold: preprocessing, training of the prompt/head
parameters against L = L_k + omega * L_gp, and clip/video evaluation."""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch

from app.config import ExperimentConfig
from app.datasim.folds import FoldPlan, fold_videos
from app.datasim.generator import SyntheticDataset, SyntheticVideo, build_sentences
from app.datasim.windows import window_clips
from app.diffmath import DTYPE
from app.diffmath.graph import named_gradients
from app.diffmath.optim import OptimizerState
from app.gait.parameters import NormalizationStats, fit_normalization, select_combinations
from app.models.decoder import prefix_embeddings
from app.models.losses import CombinedLossConfig, FocalConfig, focal_contrastive, numeric_alignment_loss, one_hot, total_loss
from app.models.pipeline import GaitVLM
from app.models.transformer import FrozenTextEncoder
from app.processing.metrics import evaluate, majority_vote
from app.utils.errors import DatasetError
from app.utils.models import FoldReport, NumericSentence, ParameterCombination

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.gvlm"


@dataclass
class FoldData:
    clips: torch.Tensor  # (N, window, F_in)
    labels: torch.Tensor  # (N,)
    numeric: Optional[torch.Tensor]  # (N, d) F^num of the clip's paired sentence
    paired: torch.Tensor  # (N,) bool
    val_clips: torch.Tensor
    val_labels: torch.Tensor
    val_video: List[str]  # video id per validation clip
    stats: Optional[NormalizationStats]
    combinations: List[ParameterCombination]
    sentences: List[NumericSentence]
    sentence_features: Optional[torch.Tensor]  # (len(sentences), d)


@dataclass
class FoldResult:
    report: FoldReport
    model: GaitVLM
    data: FoldData


def _clips(videos: List[SyntheticVideo], cfg: ExperimentConfig, validation: bool):
    clips, labels, owners = [], [], []
    for v in videos:
        for clip in window_clips(v.frames, cfg.window, cfg.train_stride, validation):
            clips.append(clip)
            labels.append(v.label)
            owners.append(v.video_id)
    if not clips:
        return torch.zeros(0, cfg.window, cfg.f_in, dtype=DTYPE), torch.zeros(0, dtype=torch.long), owners
    return torch.tensor(np.stack(clips), dtype=DTYPE), torch.tensor(labels, dtype=torch.long), owners


def prepare_fold(
    cfg: ExperimentConfig,
    dataset: SyntheticDataset,
    plan: FoldPlan,
    index: int,
    text_encoder: FrozenTextEncoder,
) -> FoldData:
    """Windows, training-split normalization and combinations, and the F^num
    attached to each paired training clip."""
    train_videos = fold_videos(dataset, plan, index, validation=False)
    val_videos = fold_videos(dataset, plan, index, validation=True)
    if not train_videos or not val_videos:
        raise DatasetError(f"Fold {index} has an empty train or validation side")
    clips, labels, owners = _clips(train_videos, cfg, validation=False)
    val_clips, val_labels, val_owner = _clips(val_videos, cfg, validation=True)

    train_sets = [v.parameters for v in train_videos if v.paired]
    stats, combos, sentences, features = None, [], [], None
    numeric, paired = None, torch.zeros(len(owners), dtype=torch.bool)
    if len(train_sets) >= 2:
        stats = fit_normalization(train_sets, healthy_label=0)
        combos = [c for c in select_combinations(train_sets, cfg.combination_size, cfg.correlation_threshold)
                  if all(pid in stats.mean for pid in c.ids)]
    else:
        logger.warning(f"Fold {index}: fewer than two paired training videos; L_gp disabled")
    if combos:
        by_video: Dict[str, List[int]] = {}
        for v in train_videos:
            if not v.paired:
                continue
            built = build_sentences([v.parameters], combos, cfg.sentences_per_set, seed=cfg.seed + index)
            by_video[v.video_id] = list(range(len(sentences), len(sentences) + len(built)))
            sentences.extend(built)
        features = prefix_embeddings(sentences, text_encoder, stats)
        numeric = torch.zeros(len(owners), text_encoder.d, dtype=DTYPE)
        seen: Dict[str, int] = {}
        for i, owner in enumerate(owners):
            if owner in by_video:
                j = seen.get(owner, 0)
                numeric[i] = features[by_video[owner][j % len(by_video[owner])]]
                paired[i] = True
                seen[owner] = j + 1
    logger.info(
        f"Fold {index}: {len(owners)} training clips ({int(paired.sum())} paired), "
        f"{len(val_owner)} validation clips, {len(combos)} combinations, {len(sentences)} sentences"
    )
    return FoldData(clips, labels, numeric, paired, val_clips, val_labels, val_owner, stats, combos, sentences, features)


def fit(model: GaitVLM, data: FoldData, cfg: ExperimentConfig, seed: int) -> List[float]:
    """Mini-batch training of the trainable parameters; returns per-epoch mean loss."""
    params = model.trainable_parameters()
    state = OptimizerState(params, lr=cfg.lr)
    focal = FocalConfig(alpha=cfg.focal_alpha, gamma=cfg.focal_gamma, tau=cfg.tau)
    combined = CombinedLossConfig(omega=cfg.omega)
    gen = torch.Generator().manual_seed(seed)
    n = data.clips.shape[0]
    curve: List[float] = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            labels = data.labels[idx]
            f_t = model.text_features()
            f_v = model.video_features(data.clips[idx])
            l_k = focal_contrastive(f_v, f_t, one_hot(labels, model.n_classes), focal)
            l_gp = None
            if cfg.use_nte and data.numeric is not None:
                mask = data.paired[idx]
                if mask.any():
                    l_gp = numeric_alignment_loss(data.numeric[idx][mask], f_t, labels[mask], model.heads, cfg.tau)
            loss = total_loss(l_k, l_gp, combined)
            state.step(named_gradients(loss, params))
            total += loss.item()
            batches += 1
        curve.append(total / max(batches, 1))
        logger.debug(f"epoch {epoch + 1}/{cfg.epochs} loss={curve[-1]:.6f}")
    return curve


def evaluate_fold(model: GaitVLM, data: FoldData):
    """Clip predictions, majority vote per video, metrics over videos."""
    clip_pred = model.predict(data.val_clips)
    clip_accuracy = float((clip_pred == data.val_labels).double().mean()) if len(clip_pred) else 0.0
    per_video: Dict[str, List[int]] = {}
    truth: Dict[str, int] = {}
    for owner, pred, label in zip(data.val_video, clip_pred.tolist(), data.val_labels.tolist()):
        per_video.setdefault(owner, []).append(pred)
        truth[owner] = label
    videos = sorted(per_video)
    video_pred = [majority_vote(per_video[v], model.n_classes) for v in videos]
    return evaluate(video_pred, [truth[v] for v in videos], model.n_classes, clip_accuracy=clip_accuracy)


def train_fold(
    cfg: ExperimentConfig,
    dataset: SyntheticDataset,
    plan: FoldPlan,
    index: int,
    run_dir: Optional[str] = None,
    text_encoder: Optional[FrozenTextEncoder] = None,
) -> FoldResult:
    if dataset is None or not dataset.subjects:
        raise DatasetError("train_fold needs a generated or loaded dataset")
    logger.info(f"Fold {index}/{plan.k}: training variant '{cfg.variant_name()}' (seed={cfg.seed})")
    model = GaitVLM(cfg, text_encoder=text_encoder)
    data = prepare_fold(cfg, dataset, plan, index, model.text_encoder)
    curve = fit(model, data, cfg, seed=cfg.seed * 1000 + index)
    metrics = evaluate_fold(model, data)
    checkpoint = None
    if run_dir:
        checkpoint = os.path.join(f"fold_{index}", CHECKPOINT_NAME)
        model.save(os.path.join(run_dir, checkpoint))
    logger.info(f"Fold {index}: accuracy={metrics.accuracy:.4f} macro_f1={metrics.macro_f1:.4f} clip_accuracy={metrics.clip_accuracy:.4f}")
    return FoldResult(FoldReport(fold=index, metrics=metrics, loss_curve=curve, checkpoint=checkpoint), model, data)
