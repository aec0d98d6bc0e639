"""
Multi-view fusion: average a breast's CC and MLO feature vectors.

Fused tables hold one row per breast side, ordered by study_id with the left
breast before the right. A side with only one view passes that view's vector
through and records the gap in ``views_present``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np

from .errors import IntegrityError
from .extractor import VIEW_BIT, FeatureMatrix, FeatureVector
from .labels import LabelScheme, Laterality, StudyRecord, ViewKind, ViewTag

logger = logging.getLogger(__name__)

ImageKey = Tuple[str, Laterality, ViewKind]


@dataclass
class SideFeature:
    values: np.ndarray
    study_id: str
    laterality: Laterality
    label_diag: Optional[int]
    label_dens: Optional[int]
    views_present: int

    def has(self, view: ViewKind) -> bool:
        return bool(self.views_present & VIEW_BIT[view])


def fuse_side(cc: Optional[FeatureVector], mlo: Optional[FeatureVector]) -> SideFeature:
    """
    Fuse the CC and MLO vectors of one breast.

    Both present: elementwise mean, diagnosis = max of the two view labels,
    density from CC. One present: that vector unchanged.

    Raises:
        ValueError: no view given, or vector lengths differ.
        IntegrityError: the views belong to different breasts.
    """
    present = [v for v in (cc, mlo) if v is not None]
    if not present:
        raise ValueError("fuse_side needs at least one view")
    if len(present) == 1:
        only = present[0]
        return SideFeature(values=np.array(only.values, copy=True), study_id=only.study_id,
                           laterality=only.laterality, label_diag=only.diagnosis,
                           label_dens=only.density,
                           views_present=VIEW_BIT[ViewKind.CC if cc is not None else ViewKind.MLO])

    if cc.values.shape != mlo.values.shape:
        raise ValueError(f"Cannot fuse vectors of length {cc.values.shape[0]} and {mlo.values.shape[0]}")
    if (cc.study_id, cc.laterality) != (mlo.study_id, mlo.laterality):
        raise IntegrityError(f"Cannot fuse {cc.study_id}/{cc.laterality.value} with "
                             f"{mlo.study_id}/{mlo.laterality.value}")
    labels = [v.diagnosis for v in (cc, mlo) if v.diagnosis is not None]
    return SideFeature(
        values=(cc.values + mlo.values) / 2,
        study_id=cc.study_id,
        laterality=cc.laterality,
        label_diag=max(labels) if labels else None,
        label_dens=cc.density if cc.density is not None else mlo.density,
        views_present=VIEW_BIT[ViewKind.CC] | VIEW_BIT[ViewKind.MLO],
    )


def _index_rows(features: Mapping[ViewTag, FeatureMatrix],
                known: Optional[Set[ImageKey]]) -> Tuple[Dict[ImageKey, FeatureVector], int, LabelScheme]:
    rows: Dict[ImageKey, FeatureVector] = {}
    widths = ({m.n_features for m in features.values() if len(m)}
              or {m.n_features for m in features.values()})
    if len(widths) > 1:
        raise ValueError(f"Feature matrices disagree on the feature count: {sorted(widths)}")
    schemes = {m.scheme for m in features.values()}
    if len(schemes) != 1:
        raise IntegrityError("Feature matrices use different label schemes")

    for tag, matrix in features.items():
        for k in range(len(matrix)):
            vector = matrix.row(k)
            if (vector.laterality, vector.view) != (tag.laterality, tag.view):
                raise IntegrityError(f"Row {k} of the {tag.name} features is a "
                                     f"{vector.laterality.value}-{vector.view.value} image")
            key = (vector.study_id, vector.laterality, vector.view)
            if known is not None and key not in known:
                raise IntegrityError(f"Feature row {vector.study_id} {tag.name} has no manifest image")
            if key in rows:
                raise IntegrityError(f"Duplicate feature row for {vector.study_id} {tag.name}")
            rows[key] = vector
    width = widths.pop() if widths else 0
    return rows, width, schemes.pop()


def _manifest_keys(studies: Optional[Iterable[StudyRecord]]) -> Optional[Set[ImageKey]]:
    if studies is None:
        return None
    return {record.key for study in studies for record in study.images}


def _side_order(keys: Iterable[ImageKey]) -> List[Tuple[str, Laterality]]:
    sides = {(sid, lat) for sid, lat, _ in keys}
    return sorted(sides, key=lambda s: (s[0], s[1] is Laterality.R))


def build_training_table(features: Mapping[ViewTag, FeatureMatrix],
                         studies: Optional[Iterable[StudyRecord]] = None) -> FeatureMatrix:
    """
    Fuse per-view feature matrices into one row per breast side.

    Args:
        features: Feature matrix of each view (some may be empty).
        studies: Manifest studies; every feature row must map to one of their images.

    Returns:
        FeatureMatrix with ``views`` set to None on every row.

    Raises:
        IntegrityError: orphan or duplicate feature rows.
    """
    rows, width, scheme = _index_rows(features, _manifest_keys(studies))
    sides = []
    for sid, lat in _side_order(rows):
        sides.append(fuse_side(rows.get((sid, lat, ViewKind.CC)), rows.get((sid, lat, ViewKind.MLO))))

    incomplete = sum(1 for s in sides if s.views_present != 3)
    if incomplete:
        logger.warning("%d breast sides have a single view; their vector is passed through", incomplete)
    if not sides:
        return FeatureMatrix.empty(width, scheme)
    return FeatureMatrix(
        values=np.stack([s.values for s in sides]).astype(np.float32),
        study_ids=[s.study_id for s in sides],
        lateralities=[s.laterality for s in sides],
        views=[None] * len(sides),
        y_diag=np.array([s.label_diag for s in sides], dtype=np.intp),
        y_dens=np.array([s.label_dens for s in sides], dtype=np.intp),
        views_present=np.array([s.views_present for s in sides], dtype=np.uint8),
        scheme=scheme,
    )


def build_image_table(features: Mapping[ViewTag, FeatureMatrix],
                      studies: Optional[Iterable[StudyRecord]] = None) -> FeatureMatrix:
    """Single-view table: every image is its own row (study_id, L before R, CC before MLO)."""
    rows, width, scheme = _index_rows(features, _manifest_keys(studies))
    keys = sorted(rows, key=lambda k: (k[0], k[1] is Laterality.R, k[2] is ViewKind.MLO))
    if not keys:
        return FeatureMatrix.empty(width, scheme)
    vectors = [rows[k] for k in keys]
    return FeatureMatrix(
        values=np.stack([v.values for v in vectors]).astype(np.float32),
        study_ids=[v.study_id for v in vectors],
        lateralities=[v.laterality for v in vectors],
        views=[v.view for v in vectors],
        y_diag=np.array([v.diagnosis for v in vectors], dtype=np.intp),
        y_dens=np.array([v.density for v in vectors], dtype=np.intp),
        views_present=np.array([VIEW_BIT[v.view] for v in vectors], dtype=np.uint8),
        scheme=scheme,
    )
