"""
Train/validation/test splitting by iterative multilabel stratification.

Each study is described by its breast-level indicator labels (diagnosis and
density per side). Labels are processed rarest first; each study carrying the
current label goes to the split that still wants the most of that label.
A split that has reached its size target takes no further studies while
another split still has room, so split sizes stay on target even when the
label demands of several splits are equal.
"""

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Sequence

import numpy as np
from sklearn.preprocessing import MultiLabelBinarizer

from ..config.settings import StratifyConfig
from .errors import ConfigError
from .labels import StudyRecord

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        values = self.as_array()
        if np.any(values <= 0.0) or np.any(values >= 1.0):
            raise ConfigError(f"Split fractions must lie in (0, 1), got {tuple(values)}")
        if abs(float(values.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"Split fractions must sum to 1, got {float(values.sum())}")

    @classmethod
    def from_config(cls, cfg: StratifyConfig) -> "SplitRatios":
        return cls(cfg.train, cfg.val, cfg.test)

    def as_array(self) -> np.ndarray:
        return np.array([self.train, self.val, self.test], dtype=np.float64)


def study_labelset(study: StudyRecord) -> FrozenSet[str]:
    """Indicator labels of a study, e.g. ``{"diag_L=2", "dens_L=B", ...}``."""
    labels = set()
    for lat in study.lateralities():
        labels.add(f"diag_{lat.value}={study.breast_diagnosis(lat).render()}")
        labels.add(f"dens_{lat.value}={study.breast_density(lat).render()}")
    return frozenset(labels)


def stratified_split(studies: Sequence[StudyRecord], ratios: SplitRatios, seed: int) -> Dict[str, str]:
    """
    Assign every study to train, val or test.

    Args:
        studies: Studies to split; each is assigned exactly once.
        ratios: Desired split fractions.
        seed: Seed of the study visiting order.

    Returns:
        Mapping study_id -> split name. Deterministic for a fixed input order and seed.
    """
    n = len(studies)
    if n < 3:
        raise ValueError(f"Need at least 3 studies to split, got {n}")

    labelsets = [sorted(study_labelset(s)) for s in studies]
    binarizer = MultiLabelBinarizer()
    indicators = binarizer.fit_transform(labelsets).astype(bool)
    n_labels = indicators.shape[1]

    r = ratios.as_array()
    split_demand = r * n
    label_demand = np.outer(indicators.sum(axis=0), r)
    order = np.random.default_rng(seed).permutation(n)

    assignment = np.full(n, -1, dtype=np.intp)
    unassigned = np.ones(n, dtype=bool)

    def assign(i: int, j: int) -> None:
        assignment[i] = j
        unassigned[i] = False
        label_demand[indicators[i], j] -= 1
        split_demand[j] -= 1

    while unassigned.any():
        remaining = indicators[unassigned].sum(axis=0) if n_labels else np.zeros(0)
        if not np.any(remaining > 0):
            # studies without any indicator fill the largest remaining capacity
            for i in order:
                if unassigned[i]:
                    assign(i, int(np.argmax(split_demand)))
            break

        label = int(np.argmin(np.where(remaining > 0, remaining, np.inf)))
        for i in order:
            if not (unassigned[i] and indicators[i, label]):
                continue
            # full splits take no more studies while another split has room
            open_splits = np.flatnonzero(split_demand > 0)
            if open_splits.size == 0:
                open_splits = np.arange(len(SPLIT_NAMES))
            demand = label_demand[label, open_splits]
            candidates = open_splits[demand == demand.max()]
            if candidates.size > 1:
                capacity = split_demand[candidates]
                candidates = candidates[capacity == capacity.max()]
            assign(i, int(candidates[0]))

    result = {study.study_id: SPLIT_NAMES[j] for study, j in zip(studies, assignment)}
    sizes = {name: int(np.sum(assignment == j)) for j, name in enumerate(SPLIT_NAMES)}
    logger.info("Stratified %d studies over %d indicator labels: %s", n, n_labels, sizes)
    return result


def split_sizes(assignment: Dict[str, str]) -> Dict[str, int]:
    counts = {name: 0 for name in SPLIT_NAMES}
    for split in assignment.values():
        counts[split] += 1
    return counts


def indicator_proportions(studies: Sequence[StudyRecord], assignment: Dict[str, str]) -> Dict[str, Dict[str, float]]:
    """Share of studies carrying each indicator label, globally and per split."""
    groups: Dict[str, List[StudyRecord]] = {"all": list(studies)}
    for study in studies:
        groups.setdefault(assignment[study.study_id], []).append(study)
    table: Dict[str, Dict[str, float]] = {}
    for name, members in groups.items():
        counts: Dict[str, int] = {}
        for study in members:
            for label in study_labelset(study):
                counts[label] = counts.get(label, 0) + 1
        table[name] = {label: c / len(members) for label, c in counts.items()}
    return table
