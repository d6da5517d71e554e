# app/processing/decoding.py
"""Decoder experiment: corpus from synthetic parameter sets, prefix-LM
training, held-out fidelity, and class interpretation for a finished run."""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import ExperimentConfig
from app.datasim.folds import make_folds
from app.datasim.generator import SimulationConfig, SyntheticDataset, build_sentences, sample_parameter_sets
from app.gait.parameters import NormalizationStats, fit_normalization, select_combinations
from app.models.decoder import (
    DecoderConfig,
    EmbeddingBank,
    TextDecoder,
    decode_batch,
    decoder_fidelity,
    detokenize_ids,
    interpret_classes,
    prefix_embeddings,
    train_decoder,
)
from app.models.pipeline import GaitVLM, build_text_encoder
from app.models.transformer import FrozenTextEncoder
from app.processing.cv import run_dataset
from app.processing.trainer import CHECKPOINT_NAME, prepare_fold
from app.utils import file_handler
from app.utils.errors import DatasetError, MissingArtifactsError
from app.utils.models import NumericSentence

logger = logging.getLogger(__name__)

INTERPRETATIONS_NAME = "interpretations.json"
DECODER_REPORT_NAME = "decoder.json"
HELD_OUT_FRACTION = 0.1


def decoder_config(cfg: ExperimentConfig) -> DecoderConfig:
    return DecoderConfig(
        d=cfg.d,
        n_layers=cfg.decoder_layers,
        n_heads=cfg.decoder_heads,
        n_prefix=cfg.decoder_prefix,
        max_len=cfg.decoder_max_len,
        epochs=cfg.decoder_epochs,
        batch_size=cfg.decoder_batch_size,
        lr=cfg.decoder_lr,
        warmup_fraction=cfg.decoder_warmup_fraction,
        min_lr_ratio=cfg.decoder_min_lr_ratio,
        clip_norm=cfg.decoder_clip_norm,
        ordinal_all_tokens=cfg.ordinal_all_tokens,
    )


@dataclass
class DecoderRun:
    model: TextDecoder
    stats: NormalizationStats
    curve: List[float]
    fidelity: float
    n_train: int
    n_held_out: int
    samples: List[Dict[str, str]]

    def summary(self) -> Dict[str, object]:
        return {
            "n_train": self.n_train,
            "n_held_out": self.n_held_out,
            "fidelity": self.fidelity,
            "loss_curve": self.curve,
            "samples": self.samples,
        }


def decoder_corpus(cfg: ExperimentConfig) -> Tuple[NormalizationStats, List[NumericSentence]]:
    """(stats, sentences): ``decoder_parameter_sets`` sets sampled from the
    cohort model, each written over ``decoder_sentences_per_set`` of a seeded
    pick of ``decoder_combinations`` filtered combinations."""
    sets = sample_parameter_sets(SimulationConfig.from_experiment(cfg), cfg.decoder_parameter_sets, cfg.seed)
    stats = fit_normalization(sets, healthy_label=0)
    combos = [
        c for c in select_combinations(sets, cfg.combination_size, cfg.correlation_threshold)
        if all(pid in stats.mean for pid in c.ids)
    ]
    if not combos:
        raise DatasetError("No parameter combinations pass the correlation filter")
    if len(combos) > cfg.decoder_combinations:
        picks = np.random.default_rng([cfg.seed, 17]).choice(len(combos), size=cfg.decoder_combinations, replace=False)
        combos = [combos[int(i)] for i in sorted(picks)]
    corpus = build_sentences(sets, combos, cfg.decoder_sentences_per_set, seed=cfg.seed)
    logger.info(f"Decoder corpus: {len(corpus)} sentences over {len(sets)} parameter sets and {len(combos)} combinations")
    return stats, corpus


def split_held_out(corpus: Sequence[NumericSentence], seed: int, fraction: float = HELD_OUT_FRACTION):
    order = np.random.default_rng([seed, 29]).permutation(len(corpus))
    n_held = max(1, int(round(len(corpus) * fraction)))
    return [corpus[i] for i in order[n_held:]], [corpus[i] for i in order[:n_held]]


def run_decoder(
    cfg: ExperimentConfig,
    encoder: Optional[FrozenTextEncoder] = None,
    n_samples: int = 5,
) -> DecoderRun:
    """Trains the decoder and measures decode(encode(s)) fidelity on held-out sentences."""
    encoder = encoder or build_text_encoder(cfg)
    stats, corpus = decoder_corpus(cfg)
    train, held_out = split_held_out(corpus, cfg.seed)
    model, curve = train_decoder(train, encoder, stats, decoder_config(cfg), seed=cfg.seed)
    fidelity = decoder_fidelity(model, held_out, encoder, stats)
    shown = held_out[:n_samples]
    results = decode_batch(model, prefix_embeddings(shown, encoder, stats)) if shown else []
    samples = [
        {"expected": s.text, "decoded": detokenize_ids(r.ids, encoder.vocab, stats)} for s, r in zip(shown, results)
    ]
    logger.info(f"Decoder fidelity {fidelity:.4f} on {len(held_out)} held-out sentences ({len(train)} trained)")
    return DecoderRun(model, stats, curve, fidelity, len(train), len(held_out), samples)


def interpret_run(
    run_dir: str,
    cfg: ExperimentConfig,
    decoder: TextDecoder,
    dataset: Optional[SyntheticDataset] = None,
    fold: int = 0,
    stats: Optional[NormalizationStats] = None,
) -> Dict[str, List[str]]:
    """Sentences describing each class of a trained fold, from its numeric
    embedding bank. ``stats`` should be the normalization the decoder was
    trained with; the bank is then encoded and read back with it. Without
    ``stats`` the fold's own normalization is used."""
    checkpoint = os.path.join(run_dir, f"fold_{fold}", CHECKPOINT_NAME)
    if not os.path.exists(checkpoint):
        raise MissingArtifactsError([checkpoint])
    dataset = dataset or run_dataset(cfg, run_dir)
    encoder = build_text_encoder(cfg, decoder.vocab)
    model = GaitVLM(cfg, text_encoder=encoder).load(checkpoint)
    plan = make_folds(dataset, cfg.n_folds, cfg.seed, cfg.split_level)
    data = prepare_fold(cfg, dataset, plan, fold, encoder)
    if data.sentence_features is None:
        raise DatasetError(f"Fold {fold} has no numeric sentences to build an embedding bank from")
    features = data.sentence_features
    if stats is None:
        stats = data.stats
    else:
        features = prefix_embeddings(data.sentences, encoder, stats)
    bank = EmbeddingBank()
    bank.extend(features, model.heads.numeric(features).detach(), [s.text for s in data.sentences])
    f_t = model.text_features().detach()
    names = [c.name for c in model.knowledge]
    interpretations = interpret_classes(f_t, bank, model.heads, decoder, names, tau_interp=cfg.tau_interp, stats=stats)
    file_handler.save_json(os.path.join(run_dir, INTERPRETATIONS_NAME), interpretations)
    return interpretations
