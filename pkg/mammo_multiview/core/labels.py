"""
Domain vocabulary: ordinal labels, views, studies and the label-aggregation
rules shared by the rest of the pipeline.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple, Type, TYPE_CHECKING

from .errors import LabelParseError

if TYPE_CHECKING:
    from .imaging import BoundingBox

logger = logging.getLogger(__name__)


class OrdinalLabel(Enum):
    """Enum whose members are totally ordered by declaration order."""

    @property
    def index(self) -> int:
        """Zero-based class index."""
        return type(self)._member_names_.index(self.name)

    @classmethod
    def from_index(cls, index: int) -> "OrdinalLabel":
        members = list(cls)
        if not 0 <= index < len(members):
            raise IndexError(f"{cls.__name__} has no class index {index}")
        return members[index]

    @classmethod
    def class_names(cls) -> List[str]:
        """Display names used in report rows."""
        return [member.display for member in cls]

    @property
    def display(self) -> str:
        return self.value

    def render(self) -> str:
        """Token accepted back by `parse_label`."""
        return self.value

    def _check(self, other) -> bool:
        return type(other) is type(self)

    def __lt__(self, other):
        if not self._check(other):
            return NotImplemented
        return self.index < other.index

    def __le__(self, other):
        if not self._check(other):
            return NotImplemented
        return self.index <= other.index

    def __gt__(self, other):
        if not self._check(other):
            return NotImplemented
        return self.index > other.index

    def __ge__(self, other):
        if not self._check(other):
            return NotImplemented
        return self.index >= other.index


class BiRadsLabel(OrdinalLabel):
    """BI-RADS assessment categories 1 (negative) to 5 (highly suggestive of malignancy)."""
    BIRADS_1 = "1"
    BIRADS_2 = "2"
    BIRADS_3 = "3"
    BIRADS_4 = "4"
    BIRADS_5 = "5"


class DensityLabel(OrdinalLabel):
    """Breast composition A (almost entirely fatty) to D (extremely dense)."""
    A = "A"
    B = "B"
    C = "C"
    D = "D"


class PathologyLabel(OrdinalLabel):
    NORMAL = "normal"
    BENIGN = "benign"
    CANCER = "cancer"

    @property
    def display(self) -> str:
        return {"normal": "Normal", "benign": "Benign", "cancer": "Malignant"}[self.value]


class DiagnosisMode(Enum):
    BIRADS5 = "birads5"
    PATHOLOGY3 = "pathology3"


class LabelKind(Enum):
    DIAGNOSIS = "diagnosis"
    DENSITY = "density"


@dataclass(frozen=True)
class LabelScheme:
    """Which diagnosis vocabulary a dataset uses. Density always has 4 classes."""
    diagnosis_mode: DiagnosisMode = DiagnosisMode.BIRADS5
    density_classes: int = field(default=4, init=False)

    @classmethod
    def from_name(cls, name: str) -> "LabelScheme":
        try:
            return cls(DiagnosisMode(name.strip().lower()))
        except ValueError:
            raise LabelParseError(name, f"Unknown label scheme: {name!r}") from None

    @property
    def name(self) -> str:
        return self.diagnosis_mode.value

    @property
    def diagnosis_type(self) -> Type[OrdinalLabel]:
        if self.diagnosis_mode is DiagnosisMode.BIRADS5:
            return BiRadsLabel
        return PathologyLabel

    @property
    def diagnosis_classes(self) -> int:
        return len(self.diagnosis_type)

    def label_type(self, kind: LabelKind) -> Type[OrdinalLabel]:
        return self.diagnosis_type if kind is LabelKind.DIAGNOSIS else DensityLabel

    def n_classes(self, kind: LabelKind) -> int:
        return len(self.label_type(kind))


BIRADS5 = LabelScheme(DiagnosisMode.BIRADS5)
PATHOLOGY3 = LabelScheme(DiagnosisMode.PATHOLOGY3)


class Laterality(Enum):
    L = "L"
    R = "R"


class ViewKind(Enum):
    CC = "CC"
    MLO = "MLO"


class ViewTag(NamedTuple):
    """One of the four screening views, e.g. ``L-CC``."""
    laterality: Laterality
    view: ViewKind

    @property
    def name(self) -> str:
        return f"{self.laterality.value}-{self.view.value}"

    @classmethod
    def parse(cls, text: str) -> "ViewTag":
        try:
            lat, view = text.strip().upper().split("-")
            return cls(Laterality(lat), ViewKind(view))
        except ValueError:
            raise ValueError(f"Unknown view {text!r}; expected one of "
                             f"{', '.join(v.name for v in ALL_VIEWS)}") from None


ALL_VIEWS: Tuple[ViewTag, ...] = (
    ViewTag(Laterality.L, ViewKind.CC),
    ViewTag(Laterality.R, ViewKind.CC),
    ViewTag(Laterality.L, ViewKind.MLO),
    ViewTag(Laterality.R, ViewKind.MLO),
)


@dataclass(frozen=True)
class ImageRecord:
    """One manifest row: a single view image and its labels."""
    study_id: str
    laterality: Laterality
    view: ViewKind
    image_path: str
    diagnosis: OrdinalLabel
    density: DensityLabel
    split: Optional[str] = None
    roi: Optional["BoundingBox"] = None

    @property
    def key(self) -> Tuple[str, Laterality, ViewKind]:
        return (self.study_id, self.laterality, self.view)

    @property
    def view_tag(self) -> ViewTag:
        return ViewTag(self.laterality, self.view)


@dataclass(frozen=True)
class StudyRecord:
    """A screening exam with up to four images, at most one per (laterality, view)."""
    study_id: str
    images: Tuple[ImageRecord, ...]

    def __post_init__(self):
        seen = set()
        for record in self.images:
            if record.study_id != self.study_id:
                raise ValueError(f"Image of study {record.study_id} placed in study {self.study_id}")
            if record.view_tag in seen:
                raise ValueError(f"Study {self.study_id} has two {record.view_tag.name} images")
            seen.add(record.view_tag)

    def image(self, laterality: Laterality, view: ViewKind) -> Optional[ImageRecord]:
        for record in self.images:
            if record.laterality is laterality and record.view is view:
                return record
        return None

    def lateralities(self) -> List[Laterality]:
        present = {record.laterality for record in self.images}
        return [lat for lat in Laterality if lat in present]

    @property
    def split(self) -> Optional[str]:
        return self.images[0].split if self.images else None

    def breast_diagnosis(self, laterality: Laterality) -> Optional[OrdinalLabel]:
        labels = [r.diagnosis for r in self.images if r.laterality is laterality]
        if not labels:
            return None
        result = labels[0]
        for label in labels[1:]:
            result = combine_view_labels(result, label)
        return result

    def breast_density(self, laterality: Laterality) -> Optional[DensityLabel]:
        """Density of a breast; the CC image wins when the two views disagree."""
        cc = self.image(laterality, ViewKind.CC)
        if cc is not None:
            return cc.density
        mlo = self.image(laterality, ViewKind.MLO)
        return mlo.density if mlo is not None else None


def group_studies(records: Iterable[ImageRecord]) -> List[StudyRecord]:
    """Group image rows into studies, keeping first-appearance order."""
    grouped: Dict[str, List[ImageRecord]] = {}
    for record in records:
        grouped.setdefault(record.study_id, []).append(record)
    return [StudyRecord(study_id, tuple(rows)) for study_id, rows in grouped.items()]


def combine_view_labels(a: OrdinalLabel, b: OrdinalLabel) -> OrdinalLabel:
    """Breast label from its CC and MLO labels: the ordinal maximum."""
    if type(a) is not type(b):
        raise TypeError(f"Cannot combine {type(a).__name__} with {type(b).__name__}")
    return a if a >= b else b


class StudyLabel(NamedTuple):
    label: OrdinalLabel
    partial: bool


def study_label(left: Optional[OrdinalLabel], right: Optional[OrdinalLabel]) -> StudyLabel:
    """
    Study label from its two breast labels.

    A missing side propagates the present one with ``partial`` set.
    """
    if left is None and right is None:
        raise ValueError("Study has no labelled breast")
    if left is None or right is None:
        present = left if left is not None else right
        logger.warning("Study label computed from one breast only (%s)", present.render())
        return StudyLabel(present, True)
    return StudyLabel(combine_view_labels(left, right), False)


_PATHOLOGY_ALIASES = {
    "normal": PathologyLabel.NORMAL,
    "benign": PathologyLabel.BENIGN,
    "benign with callback": PathologyLabel.BENIGN,
    "benign without callback": PathologyLabel.BENIGN,
    "cancer": PathologyLabel.CANCER,
    "malignant": PathologyLabel.CANCER,
}


def parse_label(text: str, scheme: LabelScheme, kind: LabelKind) -> OrdinalLabel:
    """
    Parse a label token for the given scheme.

    Args:
        text: Raw token, case-insensitive ("4", "b", "benign without callback").
        scheme: Label scheme of the dataset.
        kind: Whether the token is a diagnosis or a density label.

    Returns:
        The ordinal label.

    Raises:
        LabelParseError: unknown token or value outside the scheme.
    """
    if text is None or not str(text).strip():
        raise LabelParseError(str(text), "Empty label token")
    token = " ".join(str(text).strip().lower().replace("_", " ").split())

    if kind is LabelKind.DENSITY:
        try:
            return DensityLabel(token.upper())
        except ValueError:
            raise LabelParseError(text, f"Unknown density token: {text!r}") from None

    if scheme.diagnosis_mode is DiagnosisMode.BIRADS5:
        try:
            return BiRadsLabel(token)
        except ValueError:
            if token.isdigit():
                raise LabelParseError(
                    text, f"BI-RADS category {text!r} outside the supported range 1-5") from None
            raise LabelParseError(text, f"Unknown BI-RADS token: {text!r}") from None

    label = _PATHOLOGY_ALIASES.get(token)
    if label is None:
        raise LabelParseError(text, f"Unknown pathology token: {text!r}")
    return label
