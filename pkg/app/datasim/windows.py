# app/datasim/windows.py
"""Sliding-window clip extraction.

Training clips start at 0, stride, 2*stride, ... while start + window <= T.
Validation clips do not overlap (stride = window).
"""

from typing import List

import numpy as np

from app.utils.errors import DatasetError


def clip_starts(n_frames: int, window: int = 70, train_stride: int = 25, validation: bool = False) -> List[int]:
    if window < 1 or train_stride < 1:
        raise DatasetError(f"window and stride must be positive, got {window}, {train_stride}")
    if n_frames < window:
        raise DatasetError(f"Video of {n_frames} frames is shorter than the {window}-frame window")
    stride = window if validation else train_stride
    return list(range(0, n_frames - window + 1, stride))


def clip_count(n_frames: int, window: int = 70, train_stride: int = 25, validation: bool = False) -> int:
    """Closed form of len(clip_starts(...))."""
    if n_frames < window:
        raise DatasetError(f"Video of {n_frames} frames is shorter than the {window}-frame window")
    stride = window if validation else train_stride
    return (n_frames - window) // stride + 1


def window_clips(frames: np.ndarray, window: int = 70, train_stride: int = 25, validation: bool = False) -> List[np.ndarray]:
    """(T, F_in) frames -> list of (window, F_in) clips."""
    return [frames[s : s + window] for s in clip_starts(frames.shape[0], window, train_stride, validation)]
