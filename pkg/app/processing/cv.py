# app/processing/cv.py
"""Cross-validation runs and ablation variants."""

import logging
import os
from typing import Dict, List, Optional

import numpy as np

from app.config import ExperimentConfig, load_config, write_config
from app.datasim.folds import make_folds
from app.datasim.generator import SimulationConfig, SyntheticDataset, generate_dataset
from app.datasim.storage import load_dataset, save_dataset
from app.models.pipeline import GaitVLM, build_text_encoder
from app.processing.trainer import CHECKPOINT_NAME, evaluate_fold, prepare_fold, train_fold
from app.utils import file_handler
from app.utils.errors import FoldFailedError, GaitVLMError, MissingArtifactsError
from app.utils.models import CVReport, FoldReport, MetricsReport

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
EMBEDDINGS_NAME = "numeric_embeddings.npz"
DATASET_DIR = "dataset"
CONFIG_NAME = "config.env"


def ablation_variants(cfg: ExperimentConfig) -> Dict[str, ExperimentConfig]:
    """Baseline, +knowledge prompts, +numeric alignment, and both."""
    return {
        "baseline": cfg.model_copy(update={"use_kapt": False, "use_nte": False}),
        "kapt": cfg.model_copy(update={"use_kapt": True, "use_nte": False}),
        "nte": cfg.model_copy(update={"use_kapt": False, "use_nte": True}),
        "full": cfg.model_copy(update={"use_kapt": True, "use_nte": True}),
    }


def resolve_dataset(cfg: ExperimentConfig, run_dir: Optional[str] = None) -> SyntheticDataset:
    """Loads ``cfg.data_dir`` when set, otherwise generates from the config
    (and stores the result under the run directory)."""
    if cfg.data_dir:
        return load_dataset(cfg.data_dir)
    dataset = generate_dataset(SimulationConfig.from_experiment(cfg))
    if run_dir:
        save_dataset(dataset, os.path.join(run_dir, DATASET_DIR))
    return dataset


def run_dataset(cfg: ExperimentConfig, run_dir: str) -> SyntheticDataset:
    """The dataset a finished run was trained on."""
    stored = os.path.join(run_dir, DATASET_DIR)
    if os.path.isdir(stored):
        return load_dataset(stored)
    return resolve_dataset(cfg)


def aggregate(cfg: ExperimentConfig, folds: List[FoldReport]) -> CVReport:
    acc = np.array([f.metrics.accuracy for f in folds])
    f1 = np.array([f.metrics.macro_f1 for f in folds])
    return CVReport(
        variant=cfg.variant_name(),
        config=cfg.model_dump(),
        folds=folds,
        mean_accuracy=float(acc.mean()),
        std_accuracy=float(acc.std()),
        mean_macro_f1=float(f1.mean()),
        std_macro_f1=float(f1.std()),
    )


def run_cv(
    cfg: ExperimentConfig, run_dir: Optional[str] = None, dataset: Optional[SyntheticDataset] = None
) -> CVReport:
    """All folds in order; any fold failure aborts the run with its fold id."""
    if run_dir:
        file_handler._ensure_dir_exists(run_dir)
        write_config(cfg, os.path.join(run_dir, CONFIG_NAME))
    dataset = dataset or resolve_dataset(cfg, run_dir)
    plan = make_folds(dataset, cfg.n_folds, cfg.seed, cfg.split_level)
    text_encoder = build_text_encoder(cfg)
    reports: List[FoldReport] = []
    for index in range(plan.k):
        try:
            result = train_fold(cfg, dataset, plan, index, run_dir, text_encoder=text_encoder)
        except GaitVLMError as e:
            logger.error(f"Fold {index} failed: {e}", exc_info=True)
            raise FoldFailedError(index, str(e)) from e
        except Exception as e:
            logger.error(f"Fold {index} failed unexpectedly: {e}", exc_info=True)
            raise FoldFailedError(index, f"{type(e).__name__}: {e}") from e
        reports.append(result.report)
        if run_dir and index == 0 and result.data.sentence_features is not None:
            np.savez(
                os.path.join(run_dir, EMBEDDINGS_NAME),
                features=result.data.sentence_features.numpy(),
                labels=np.array([s.label for s in result.data.sentences], dtype=np.int64),
            )
    report = aggregate(cfg, reports)
    logger.info(
        f"CV '{report.variant}' done: accuracy {report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f}, "
        f"macro F1 {report.mean_macro_f1:.4f} +/- {report.std_macro_f1:.4f}"
    )
    if run_dir:
        file_handler.save_json(os.path.join(run_dir, REPORT_NAME), report.model_dump())
    return report


def run_ablation(cfg: ExperimentConfig, run_dir: Optional[str] = None) -> Dict[str, CVReport]:
    """The four variants on one shared dataset; each in its own subdirectory."""
    dataset = resolve_dataset(cfg, run_dir)
    reports = {}
    for name, variant in ablation_variants(cfg).items():
        sub_dir = os.path.join(run_dir, name) if run_dir else None
        reports[name] = run_cv(variant, sub_dir, dataset)
    if run_dir:
        summary = {
            name: {
                "mean_accuracy": r.mean_accuracy,
                "std_accuracy": r.std_accuracy,
                "mean_macro_f1": r.mean_macro_f1,
                "std_macro_f1": r.std_macro_f1,
            }
            for name, r in reports.items()
        }
        file_handler.save_json(os.path.join(run_dir, "ablation.json"), summary)
    return reports


def evaluate_run(run_dir: str, folds: Optional[List[int]] = None) -> Dict[int, MetricsReport]:
    """Reloads each fold checkpoint of a finished run and re-evaluates it."""
    config_path = os.path.join(run_dir, CONFIG_NAME)
    if not os.path.exists(config_path):
        raise MissingArtifactsError([config_path])
    cfg = load_config(config_path)
    dataset = run_dataset(cfg, run_dir)
    plan = make_folds(dataset, cfg.n_folds, cfg.seed, cfg.split_level)
    text_encoder = build_text_encoder(cfg)
    indices = list(range(plan.k)) if folds is None else folds
    checkpoints = {i: os.path.join(run_dir, f"fold_{i}", CHECKPOINT_NAME) for i in indices}
    missing = [path for path in checkpoints.values() if not os.path.exists(path)]
    if missing:
        raise MissingArtifactsError(missing)
    reports = {}
    for index, checkpoint in checkpoints.items():
        model = GaitVLM(cfg, text_encoder=text_encoder).load(checkpoint)
        reports[index] = evaluate_fold(model, prepare_fold(cfg, dataset, plan, index, text_encoder))
        logger.info(f"Fold {index} re-evaluated from {checkpoint}: accuracy={reports[index].accuracy:.4f}")
    return reports
