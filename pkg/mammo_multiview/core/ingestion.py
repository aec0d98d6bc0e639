"""
Dataset manifests, image loading and four-view study validation.

A manifest is a comma-separated table with one row per image:

    study_id,laterality,view,image_path,diagnosis,density[,split][,roi_x0,roi_y0,roi_x1,roi_y1]

Image paths are resolved relative to the manifest's directory.
"""

import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .errors import DataIOError, LabelParseError, ManifestError
from .imaging import BoundingBox, GrayImage, read_image
from .labels import (
    ImageRecord,
    LabelKind,
    LabelScheme,
    Laterality,
    StudyRecord,
    ViewKind,
    group_studies,
    parse_label,
)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("study_id", "laterality", "view", "image_path", "diagnosis", "density")
ROI_COLUMNS = ("roi_x0", "roi_y0", "roi_x1", "roi_y1")
SPLITS = ("train", "val", "test")


@dataclass
class Manifest:
    """Parsed manifest: image rows in file order plus the scheme they were read with."""
    rows: List[ImageRecord]
    scheme: LabelScheme
    split_column_present: bool = False
    base_dir: Optional[Path] = None

    def studies(self) -> List[StudyRecord]:
        return group_studies(self.rows)

    def resolve(self, record: ImageRecord) -> Path:
        path = Path(record.image_path)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def with_splits(self, assignment: Dict[str, str]) -> "Manifest":
        """Copy of the manifest with the split column filled from ``assignment``."""
        missing = {r.study_id for r in self.rows} - set(assignment)
        if missing:
            raise ManifestError(f"No split assigned for studies: {sorted(missing)[:5]}")
        rows = [replace(r, split=assignment[r.study_id]) for r in self.rows]
        return Manifest(rows=rows, scheme=self.scheme, split_column_present=True,
                        base_dir=self.base_dir)

    def subset(self, split: str) -> List[ImageRecord]:
        return [r for r in self.rows if r.split == split]


def _parse_roi(row: Dict[str, str], line: int) -> Optional[BoundingBox]:
    values = [row.get(col, "") for col in ROI_COLUMNS]
    if all(v == "" for v in values):
        return None
    try:
        return BoundingBox(*(int(v) for v in values))
    except ValueError as exc:
        raise ManifestError(f"Invalid ROI columns {values}: {exc}", line) from None


def parse_manifest(text: str, scheme: LabelScheme,
                   base_dir: Optional[Union[str, Path]] = None) -> Manifest:
    """
    Parse manifest text.

    Args:
        text: Manifest contents (UTF-8 text with a header row).
        scheme: Label scheme used to parse the diagnosis column.
        base_dir: Directory image paths are relative to.

    Returns:
        Manifest with rows in file order.

    Raises:
        ManifestError: missing column, duplicate key or invalid value; the
            error names the 1-based line number of the offending row.
    """
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False,
                            skipinitialspace=True, index_col=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"Cannot parse manifest: {exc}") from None

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Missing required column(s): {', '.join(missing)}", 1)
    split_present = "split" in frame.columns
    present_roi = [c for c in ROI_COLUMNS if c in frame.columns]
    if present_roi and len(present_roi) != len(ROI_COLUMNS):
        raise ManifestError("ROI columns must be given together: " + ",".join(ROI_COLUMNS), 1)

    rows: List[ImageRecord] = []
    seen: Dict[Tuple[str, Laterality, ViewKind], int] = {}
    for offset, raw in enumerate(frame.to_dict(orient="records")):
        line = offset + 2
        row = {k: str(v).strip() for k, v in raw.items()}
        if not row["study_id"]:
            raise ManifestError("Empty study_id", line)
        try:
            laterality = Laterality(row["laterality"].upper())
        except ValueError:
            raise ManifestError(f"Invalid laterality {row['laterality']!r}", line) from None
        try:
            view = ViewKind(row["view"].upper())
        except ValueError:
            raise ManifestError(f"Invalid view {row['view']!r}", line) from None
        if not row["image_path"]:
            raise ManifestError("Empty image_path", line)
        try:
            diagnosis = parse_label(row["diagnosis"], scheme, LabelKind.DIAGNOSIS)
            density = parse_label(row["density"], scheme, LabelKind.DENSITY)
        except LabelParseError as exc:
            raise ManifestError(str(exc), line) from None

        split = None
        if split_present:
            split = row["split"].lower() or None
            if split is not None and split not in SPLITS:
                raise ManifestError(f"Invalid split {row['split']!r}", line)

        record = ImageRecord(
            study_id=row["study_id"],
            laterality=laterality,
            view=view,
            image_path=row["image_path"],
            diagnosis=diagnosis,
            density=density,
            split=split,
            roi=_parse_roi(row, line) if present_roi else None,
        )
        if record.key in seen:
            raise ManifestError(
                f"Duplicate image {record.study_id}/{record.view_tag.name} "
                f"(first seen on line {seen[record.key]})", line)
        seen[record.key] = line
        rows.append(record)

    return Manifest(rows=rows, scheme=scheme, split_column_present=split_present,
                    base_dir=Path(base_dir) if base_dir is not None else None)


def load_manifest(path: Union[str, Path], scheme: LabelScheme, check_files: bool = True) -> Manifest:
    """Read a manifest file and check that every referenced image exists."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"Cannot read manifest {path}: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = data[:exc.start].count(b"\n") + 1
        raise ManifestError(f"{path} is not valid UTF-8 (byte {exc.start})", line) from None
    manifest = parse_manifest(text, scheme, base_dir=path.parent)
    if check_files:
        for record in manifest.rows:
            if not manifest.resolve(record).is_file():
                raise DataIOError(f"Image not found: {manifest.resolve(record)}")
    return manifest


def render_manifest(manifest: Manifest, base_dir: Optional[Path] = None) -> str:
    """Render a manifest back to CSV text, including the split column when set."""
    records = []
    for r in manifest.rows:
        image_path = r.image_path
        if base_dir is not None and manifest.base_dir is not None:
            image_path = Path(manifest.resolve(r)).resolve()
            try:
                image_path = image_path.relative_to(Path(base_dir).resolve())
            except ValueError:
                pass
            image_path = Path(image_path).as_posix()
        row: Dict[str, Any] = {
            "study_id": r.study_id,
            "laterality": r.laterality.value,
            "view": r.view.value,
            "image_path": image_path,
            "diagnosis": r.diagnosis.render(),
            "density": r.density.render(),
        }
        if manifest.split_column_present:
            row["split"] = r.split or ""
        if any(x.roi is not None for x in manifest.rows):
            box = r.roi.as_tuple() if r.roi is not None else ("",) * 4
            row.update(dict(zip(ROI_COLUMNS, box)))
        records.append(row)
    columns = list(REQUIRED_COLUMNS)
    if manifest.split_column_present:
        columns.append("split")
    if any(x.roi is not None for x in manifest.rows):
        columns.extend(ROI_COLUMNS)
    return pd.DataFrame.from_records(records, columns=columns).to_csv(index=False, lineterminator="\n")


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_manifest(manifest, base_dir=path.parent), encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"Cannot write manifest {path}: {exc}") from exc


def load_image(path: Union[str, Path]) -> GrayImage:
    """Load a PGM (P2/P5, 8 or 16 bit) or 8-bit grayscale PNG image."""
    return read_image(path)


@dataclass
class Finding:
    kind: str
    study_id: str
    detail: str
    severity: str = "warning"

    def to_dict(self) -> Dict[str, str]:
        return {"kind": self.kind, "study_id": self.study_id,
                "detail": self.detail, "severity": self.severity}


@dataclass
class ValidationReport:
    """Findings about a manifest's study structure plus per-split class counts."""
    findings: List[Finding] = field(default_factory=list)
    class_counts: Dict[str, Dict[str, Dict[str, int]]] = field(default_factory=dict)
    n_studies: int = 0
    n_images: int = 0

    @property
    def is_valid(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    def of_kind(self, kind: str) -> List[Finding]:
        return [f for f in self.findings if f.kind == kind]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "is_valid": self.is_valid,
            "n_studies": self.n_studies,
            "n_images": self.n_images,
            "findings": [f.to_dict() for f in self.findings],
            "class_counts": self.class_counts,
        }


def validate_dataset(manifest: Manifest) -> ValidationReport:
    """
    Check four-view structure and tally labels.

    Reports incomplete studies, density disagreement between the CC and MLO
    of a breast, studies spread over several splits, and per-split per-class
    image counts for both targets.
    """
    report = ValidationReport(n_images=len(manifest.rows))
    studies = manifest.studies()
    report.n_studies = len(studies)

    for study in studies:
        missing = [f"{lat.value}-{view.value}" for lat in Laterality for view in ViewKind
                   if study.image(lat, view) is None]
        if missing:
            report.findings.append(Finding("incomplete_study", study.study_id,
                                           "missing " + ", ".join(missing)))
        for lat in Laterality:
            cc, mlo = study.image(lat, ViewKind.CC), study.image(lat, ViewKind.MLO)
            if cc is not None and mlo is not None and cc.density is not mlo.density:
                report.findings.append(Finding(
                    "density_mismatch", study.study_id,
                    f"{lat.value}-CC density {cc.density.render()} vs "
                    f"{lat.value}-MLO density {mlo.density.render()}"))
        splits = {r.split for r in study.images}
        if len(splits) > 1:
            report.findings.append(Finding(
                "split_conflict", study.study_id,
                "images assigned to " + ", ".join(sorted(str(s) for s in splits)),
                severity="error"))

    diag_names = [m.render() for m in manifest.scheme.diagnosis_type]
    dens_names = [m.render() for m in manifest.scheme.label_type(LabelKind.DENSITY)]
    by_split: Dict[str, List[ImageRecord]] = {}
    for record in manifest.rows:
        by_split.setdefault(record.split or "all", []).append(record)
    for split, records in by_split.items():
        diag = Counter(r.diagnosis.render() for r in records)
        dens = Counter(r.density.render() for r in records)
        report.class_counts[split] = {
            "diagnosis": {name: diag.get(name, 0) for name in diag_names},
            "density": {name: dens.get(name, 0) for name in dens_names},
        }

    for finding in report.findings:
        logger.warning("%s %s: %s", finding.kind, finding.study_id, finding.detail)
    return report


def count_table(report: ValidationReport, splits: Sequence[str] = SPLITS) -> str:
    """Plain-text per-split per-class count table."""
    lines = []
    for target in ("diagnosis", "density"):
        names: List[str] = []
        for counts in report.class_counts.values():
            names = list(counts[target])
            break
        present = [s for s in splits if s in report.class_counts] or list(report.class_counts)
        lines.append(f"{target.title():<10}" + "".join(f"{s:>8}" for s in present))
        for name in names:
            lines.append(f"{name:<10}" + "".join(
                f"{report.class_counts[s][target][name]:>8}" for s in present))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
