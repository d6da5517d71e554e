# app/datasim/storage.py
"""Dataset directory: manifest.json, parameters.csv, videos/<video_id>.npy."""

import json
import logging
import os

import numpy as np

from app.datasim.generator import SimulationConfig, SyntheticDataset, SyntheticSubject, SyntheticVideo
from app.gait.parameters import read_parameter_table, write_parameter_table
from app.utils.errors import DatasetError

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMETERS = "parameters.csv"
VIDEOS = "videos"


def save_dataset(dataset: SyntheticDataset, path: str) -> str:
    os.makedirs(os.path.join(path, VIDEOS), exist_ok=True)
    paired = [v for v in dataset.videos() if v.paired]
    write_parameter_table(
        os.path.join(path, PARAMETERS),
        [v.parameters for v in paired],
        extra={"video_id": [v.video_id for v in paired]},
    )
    for video in dataset.videos():
        np.save(os.path.join(path, VIDEOS, f"{video.video_id}.npy"), video.frames)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": dataset.config.model_dump(),
        "subjects": [
            {
                "subject_id": s.subject_id,
                "label": s.label,
                "means": {str(k): v for k, v in s.means.items()},
                "spreads": {str(k): v for k, v in s.spreads.items()},
                "videos": [{"video_id": v.video_id, "paired": v.paired, "frames": v.n_frames} for v in s.videos],
            }
            for s in dataset.subjects
        ],
    }
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved dataset ({len(dataset.subjects)} subjects) to {path}")
    return path


def load_dataset(path: str) -> SyntheticDataset:
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"No dataset at {path} (missing {MANIFEST})")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"Unsupported dataset format {manifest.get('format_version')} in {path}")
    table_path = os.path.join(path, PARAMETERS)
    rows = read_parameter_table(table_path) if os.path.exists(table_path) else []
    params = {row["video_id"]: row["set"] for row in rows}
    subjects = []
    for record in manifest["subjects"]:
        subject = SyntheticSubject(
            subject_id=record["subject_id"],
            label=int(record["label"]),
            means={int(k): float(v) for k, v in record["means"].items()},
            spreads={int(k): float(v) for k, v in record["spreads"].items()},
        )
        for v in record["videos"]:
            frames_path = os.path.join(path, VIDEOS, f"{v['video_id']}.npy")
            if not os.path.exists(frames_path):
                raise DatasetError(f"Missing frames for video {v['video_id']} in {path}")
            if v["paired"] and v["video_id"] not in params:
                raise DatasetError(f"Paired video {v['video_id']} has no row in {PARAMETERS}")
            subject.videos.append(
                SyntheticVideo(
                    video_id=v["video_id"],
                    subject_id=subject.subject_id,
                    label=subject.label,
                    frames=np.load(frames_path),
                    parameters=params.get(v["video_id"]) if v["paired"] else None,
                )
            )
        subjects.append(subject)
    logger.info(f"Loaded dataset ({len(subjects)} subjects) from {path}")
    return SyntheticDataset(SimulationConfig(**manifest["config"]), subjects)
