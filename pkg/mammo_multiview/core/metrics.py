"""
Confusion matrices, per-class F1 and the four evaluation levels.

Diagnosis is scored on left breasts, right breasts and whole studies; density
on left breasts, right breasts and all breast sides pooled. Classes without
support stay in the macro average with an F1 of 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix

from .labels import LabelKind, LabelScheme, Laterality, ViewKind

logger = logging.getLogger(__name__)

DIAGNOSIS_LEVELS = ("left", "right", "study")
DENSITY_LEVELS = ("left", "right", "side")


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are truth, columns are predictions."""
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds: Sequence[int], truth: Sequence[int], n_classes: int) -> ConfusionMatrix:
    """Count (truth, prediction) pairs."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValueError(f"Got {preds.size} predictions for {truth.size} labels")
    for name, values in (("prediction", preds), ("label", truth)):
        if values.size and (values.min() < 0 or values.max() >= n_classes):
            raise IndexError(f"{name} class outside [0, {n_classes})")
    if preds.size == 0:
        return ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    counts = confusion_matrix(truth, preds, labels=list(range(n_classes)))
    return ConfusionMatrix(counts.astype(np.int64))


@dataclass(frozen=True)
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def f1_scores(matrix: ConfusionMatrix) -> ClassScores:
    """Per-class precision, recall and F1; any 0/0 counts as 0."""
    counts = matrix.counts.astype(np.float64)
    if counts.shape[0] < 2:
        raise ValueError("F1 needs at least two classes")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    precision = _safe_ratio(tp, predicted)
    recall = _safe_ratio(tp, actual)
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    return ClassScores(precision=precision, recall=recall, f1=f1,
                       support=actual.astype(np.int64), macro_f1=float(f1.mean()))


def macro_f1(preds: Sequence[int], truth: Sequence[int], n_classes: int) -> float:
    return f1_scores(confusion(preds, truth, n_classes)).macro_f1


@dataclass
class EvalReport:
    """Scores of one target at one evaluation level."""
    level: str
    target: str
    class_names: List[str]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    macro_f1: float
    confusion: List[List[int]]
    excluded: int = 0

    @classmethod
    def build(cls, level: str, target: str, class_names: List[str],
              preds: Sequence[int], truth: Sequence[int], excluded: int = 0) -> "EvalReport":
        matrix = confusion(preds, truth, len(class_names))
        scores = f1_scores(matrix)
        return cls(level=level, target=target, class_names=list(class_names),
                   precision=scores.precision.tolist(), recall=scores.recall.tolist(),
                   f1=scores.f1.tolist(), support=scores.support.tolist(),
                   macro_f1=scores.macro_f1, confusion=matrix.counts.tolist(),
                   excluded=excluded)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "target": self.target,
            "classes": {
                name: {"precision": p, "recall": r, "f1": f, "support": s}
                for name, p, r, f, s in zip(self.class_names, self.precision,
                                            self.recall, self.f1, self.support)
            },
            "macro_f1": self.macro_f1,
            "confusion": self.confusion,
            "excluded": self.excluded,
        }


@dataclass(frozen=True)
class SidePrediction:
    """Predicted and true class indices for one breast side."""
    study_id: str
    laterality: Laterality
    pred_diag: int
    true_diag: int
    pred_dens: int
    true_dens: int


@dataclass(frozen=True)
class ImagePrediction:
    study_id: str
    laterality: Laterality
    view: ViewKind
    pred_diag: int
    true_diag: int
    pred_dens: int
    true_dens: int


def reduce_image_predictions(predictions: Iterable[ImagePrediction]) -> List[SidePrediction]:
    """
    Collapse per-image predictions into breast predictions.

    Predictions and diagnosis truth take the ordinal maximum over the breast's
    images; density truth comes from the CC image when present.
    """
    grouped: Dict[Tuple[str, Laterality], List[ImagePrediction]] = {}
    for p in predictions:
        grouped.setdefault((p.study_id, p.laterality), []).append(p)
    sides = []
    for (study_id, lat), preds in grouped.items():
        cc = [p for p in preds if p.view is ViewKind.CC]
        density_source = cc[0] if cc else preds[0]
        sides.append(SidePrediction(
            study_id=study_id,
            laterality=lat,
            pred_diag=max(p.pred_diag for p in preds),
            true_diag=max(p.true_diag for p in preds),
            pred_dens=max(p.pred_dens for p in preds),
            true_dens=density_source.true_dens,
        ))
    return sides


@dataclass
class LevelReports:
    """Diagnosis reports (left/right/study) and density reports (left/right/side)."""
    diagnosis: Dict[str, EvalReport] = field(default_factory=dict)
    density: Dict[str, EvalReport] = field(default_factory=dict)

    def macro(self) -> Dict[str, Dict[str, float]]:
        return {
            "diagnosis": {level: r.macro_f1 for level, r in self.diagnosis.items()},
            "density": {level: r.macro_f1 for level, r in self.density.items()},
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "diagnosis": {level: r.to_dict() for level, r in self.diagnosis.items()},
            "density": {level: r.to_dict() for level, r in self.density.items()},
        }


def evaluate_levels(side_predictions: Sequence[SidePrediction], scheme: LabelScheme,
                    study_ids: Optional[Sequence[str]] = None) -> LevelReports:
    """
    Score side predictions at every evaluation level.

    Args:
        side_predictions: One entry per predicted breast side. Single-view
            predictions must go through `reduce_image_predictions` first.
        scheme: Label scheme (fixes the class count of each target).
        study_ids: Studies expected in the evaluation; those without any
            predicted side are excluded and counted in the study report.

    Returns:
        LevelReports for diagnosis and density.
    """
    diag_names = scheme.label_type(LabelKind.DIAGNOSIS).class_names()
    dens_names = scheme.label_type(LabelKind.DENSITY).class_names()
    reports = LevelReports()

    for lat, level in ((Laterality.L, "left"), (Laterality.R, "right")):
        sides = [s for s in side_predictions if s.laterality is lat]
        reports.diagnosis[level] = EvalReport.build(
            level, "diagnosis", diag_names,
            [s.pred_diag for s in sides], [s.true_diag for s in sides])
        reports.density[level] = EvalReport.build(
            level, "density", dens_names,
            [s.pred_dens for s in sides], [s.true_dens for s in sides])

    by_study: Dict[str, List[SidePrediction]] = {}
    for s in side_predictions:
        by_study.setdefault(s.study_id, []).append(s)
    excluded = 0
    if study_ids is not None:
        excluded = sum(1 for sid in dict.fromkeys(study_ids) if sid not in by_study)
        if excluded:
            logger.warning("%d studies have no predicted side and were excluded", excluded)
    study_preds = [max(s.pred_diag for s in sides) for sides in by_study.values()]
    study_truth = [max(s.true_diag for s in sides) for sides in by_study.values()]
    reports.diagnosis["study"] = EvalReport.build(
        "study", "diagnosis", diag_names, study_preds, study_truth, excluded=excluded)

    reports.density["side"] = EvalReport.build(
        "side", "density", dens_names,
        [s.pred_dens for s in side_predictions], [s.true_dens for s in side_predictions])
    return reports


def _target_block(title: str, levels: Sequence[str], columns: Sequence[Tuple[str, Dict[str, EvalReport]]],
                  show_delta: bool) -> List[str]:
    first = next(iter(columns))[1]
    names = first[levels[0]].class_names
    header = f"{title:<12}"
    for label, _ in columns:
        header += "".join(f"{(label + ' ' + lvl.title())[:14]:>16}" for lvl in levels)
    if show_delta:
        header += "".join(f"{('Delta ' + lvl.title()):>14}" for lvl in levels)
    lines = [header]
    for k, name in enumerate(names):
        row = f"{name:<12}"
        for _, reports in columns:
            row += "".join(f"{reports[lvl].f1[k]:>16.4f}" for lvl in levels)
        lines.append(row)
    row = f"{'Macro-F1':<12}"
    for _, reports in columns:
        row += "".join(f"{reports[lvl].macro_f1:>16.4f}" for lvl in levels)
    if show_delta:
        row += "".join(f"{columns[-1][1][lvl].macro_f1 - columns[0][1][lvl].macro_f1:>+14.4f}"
                       for lvl in levels)
    lines.append(row)
    return lines


def render_reports(reports: LevelReports, title: str = "") -> str:
    """Text table with class rows plus Macro-F1, one column per level."""
    lines = [title] if title else []
    lines += _target_block("Diagnosis", DIAGNOSIS_LEVELS, [("", reports.diagnosis)], False)
    lines.append("")
    lines += _target_block("Density", DENSITY_LEVELS, [("", reports.density)], False)
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_comparison(single: LevelReports, multi: LevelReports) -> str:
    """Single-view and multi-view columns side by side, with macro-F1 deltas."""
    lines = ["Single-view | Multi-view"]
    lines += _target_block("Diagnosis", DIAGNOSIS_LEVELS,
                           [("Single", single.diagnosis), ("Multi", multi.diagnosis)], True)
    lines.append("")
    lines += _target_block("Density", DENSITY_LEVELS,
                           [("Single", single.density), ("Multi", multi.density)], True)
    return "\n".join(line.rstrip() for line in lines) + "\n"
