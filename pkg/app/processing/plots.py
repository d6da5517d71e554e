# app/processing/plots.py
"""Plot data emission: similarity maps (CSV + grayscale PNG), PCA of numeric
embeddings and loss curves. Image pixel (i, j) = round_half_up(255 * (M[i][j] + 1) / 2)."""

import logging
import os
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from app.config import ExperimentConfig
from app.diffmath.ops import LAYER_NORM_RANGE
from app.models.pipeline import build_text_encoder
from app.numtext.embedding import digit_similarity_map, similarity_map
from app.processing.cv import EMBEDDINGS_NAME, REPORT_NAME
from app.utils import file_handler
from app.utils.errors import MissingArtifactsError

logger = logging.getLogger(__name__)

SIMILARITY_TEMPLATE = "the walking speed is [value]"
GRID_POINTS = 201


def value_grid(points: int = GRID_POINTS) -> List[float]:
    return np.linspace(-LAYER_NORM_RANGE, LAYER_NORM_RANGE, points).tolist()


def to_gray(matrix: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(255.0 * (matrix + 1.0) / 2.0 + 0.5), 0, 255).astype(np.uint8)


def save_matrix(matrix: np.ndarray, grid: List[float], out_dir: str, stem: str) -> List[str]:
    csv_path = file_handler.save_csv(
        os.path.join(out_dir, f"{stem}.csv"),
        ["value"] + [repr(v) for v in grid],
        ([repr(grid[i])] + [repr(float(x)) for x in row] for i, row in enumerate(matrix)),
    )
    png_path = os.path.join(out_dir, f"{stem}.png")
    Image.fromarray(to_gray(matrix), mode="L").save(png_path)
    return [csv_path, png_path]


def emit_similarity(out_dir: str, cfg: ExperimentConfig, points: int = GRID_POINTS, digits: bool = True) -> List[str]:
    """Numeric-embedding similarity map over a normalized value grid, plus the
    digit-token baseline through the same frozen encoder."""
    encoder = build_text_encoder(cfg)
    grid = value_grid(points)
    written = save_matrix(similarity_map(SIMILARITY_TEMPLATE, grid, encoder.vocab, encoder), grid, out_dir, "similarity_map")
    if digits:
        baseline = digit_similarity_map(SIMILARITY_TEMPLATE, grid, encoder.vocab, encoder)
        written += save_matrix(baseline, grid, out_dir, "similarity_map_digits")
    logger.info(f"Similarity maps ({points} points) written to {out_dir}")
    return written


def pca_2d(features: np.ndarray) -> np.ndarray:
    """First two principal coordinates; each axis signed so its largest loading is positive."""
    centered = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(axes.shape[0]), np.abs(axes).argmax(axis=1)])
    signs[signs == 0] = 1.0
    coords = centered @ (axes * signs[:, None]).T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    return coords


def emit_plots(run_dir: str, cfg: Optional[ExperimentConfig] = None) -> List[str]:
    """All plot data for a completed run directory."""
    report_path = os.path.join(run_dir, REPORT_NAME)
    embeddings_path = os.path.join(run_dir, EMBEDDINGS_NAME)
    missing = [p for p in (report_path, embeddings_path) if not os.path.exists(p)]
    if missing:
        raise MissingArtifactsError(missing)
    report: Dict = file_handler.read_json(report_path)
    cfg = cfg or ExperimentConfig(**report["config"])
    written = emit_similarity(run_dir, cfg)

    stored = np.load(embeddings_path)
    coords = pca_2d(stored["features"])
    written.append(
        file_handler.save_csv(
            os.path.join(run_dir, "pca_embeddings.csv"),
            ["pc1", "pc2", "label"],
            ([repr(float(x)), repr(float(y)), int(label)] for (x, y), label in zip(coords, stored["labels"])),
        )
    )
    written.append(
        file_handler.save_csv(
            os.path.join(run_dir, "loss_curves.csv"),
            ["fold", "epoch", "loss"],
            ([fold["fold"], epoch + 1, repr(loss)] for fold in report["folds"] for epoch, loss in enumerate(fold["loss_curve"])),
        )
    )
    logger.info(f"Emitted {len(written)} plot files to {run_dir}")
    return written
