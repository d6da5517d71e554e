# app/datasim/folds.py
"""Class-stratified, grouped k-fold plans."""

import logging
from collections import defaultdict
from typing import Dict, List, Literal, Sequence

import numpy as np
from pydantic import BaseModel

from app.datasim.generator import SyntheticDataset
from app.utils.errors import DatasetError

logger = logging.getLogger(__name__)


class Fold(BaseModel):
    index: int
    train: List[str]
    validation: List[str]


class FoldPlan(BaseModel):
    """k train/validation splits over group ids (subject ids or video ids)."""

    k: int
    split_level: Literal["subject", "video"] = "subject"
    seed: int = 0
    folds: List[Fold]

    def fold(self, index: int) -> Fold:
        return self.folds[index]


def assign_groups(groups: Dict[str, int], k: int, seed: int = 0) -> List[List[str]]:
    """Deals each class's shuffled groups round-robin over k folds, continuing
    the deal across classes so fold sizes differ by at most one."""
    if len(groups) < k:
        raise DatasetError(f"Cannot make {k} folds from {len(groups)} groups")
    rng = np.random.default_rng([seed, 3])
    by_class: Dict[int, List[str]] = defaultdict(list)
    for group, label in sorted(groups.items()):
        by_class[label].append(group)
    assigned: List[List[str]] = [[] for _ in range(k)]
    counter = 0
    for label in sorted(by_class):
        members = by_class[label]
        for i in rng.permutation(len(members)):
            assigned[counter % k].append(members[int(i)])
            counter += 1
    return [sorted(f) for f in assigned]


def make_folds(
    dataset: SyntheticDataset, k: int = 10, seed: int = 0, split_level: Literal["subject", "video"] = "subject"
) -> FoldPlan:
    """Validation groups per fold; training is every other group. With
    ``split_level='video'`` videos of one subject may land in different folds."""
    if split_level == "subject":
        groups = dataset.labels
    else:
        groups = {v.video_id: v.label for v in dataset.videos()}
    if len(groups) < k:
        raise DatasetError(f"Fewer {split_level}s ({len(groups)}) than folds ({k})")
    assigned = assign_groups(groups, k, seed)
    everyone = sorted(groups)
    folds = []
    for i, val in enumerate(assigned):
        held_out = set(val)
        folds.append(Fold(index=i, train=[g for g in everyone if g not in held_out], validation=val))
    logger.info(f"Made {k} {split_level}-level folds over {len(groups)} groups (sizes {[len(f.validation) for f in folds]})")
    return FoldPlan(k=k, split_level=split_level, seed=seed, folds=folds)


def fold_videos(dataset: SyntheticDataset, plan: FoldPlan, index: int, validation: bool) -> List:
    """Videos on one side of a fold."""
    fold = plan.fold(index)
    wanted = set(fold.validation if validation else fold.train)
    if plan.split_level == "subject":
        return [v for v in dataset.videos() if v.subject_id in wanted]
    return [v for v in dataset.videos() if v.video_id in wanted]


def check_plan(plan: FoldPlan, groups: Sequence[str]) -> None:
    """Raises if a group is validated twice or never, or leaks into its own training set."""
    seen: List[str] = [g for f in plan.folds for g in f.validation]
    if sorted(seen) != sorted(groups):
        raise DatasetError("Validation groups do not partition the dataset")
    for f in plan.folds:
        if set(f.train) & set(f.validation):
            raise DatasetError(f"Fold {f.index} trains on validation groups")
