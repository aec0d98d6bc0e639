"""
Synthetic four-view screening studies.

Each breast is a half-ellipse of speckled tissue attached to the chest-wall
edge (x = 0 for right-breast images, x = width for left-breast images). Tissue
brightness and texture grow with density; the diagnosis sets how many bright
blobs the breast carries and how much they stand out. A blob shows up in each
view independently with probability ``p_vis`` but always in at least one view,
so the breast label stays recoverable from the union of its two views while a
single view can miss findings.

The density a view shows is jittered around the breast density, so one view
is a noisy reading of it and both views together a better one. Every image
carries a saturated 2x2 laterality marker in the top corner of the breast box
away from the chest wall, as film and detector markers do; it pins the
brightest level of every crop.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from ..config.settings import SynthConfig
from .errors import ConfigError, DataIOError
from .imaging import BoundingBox, GrayImage, write_pgm
from .ingestion import Manifest, validate_dataset, write_manifest
from .labels import (
    ALL_VIEWS,
    DensityLabel,
    DiagnosisMode,
    ImageRecord,
    LabelScheme,
    Laterality,
    OrdinalLabel,
    ViewKind,
    ViewTag,
)

logger = logging.getLogger(__name__)

DIAGNOSIS_PRIORS = {
    DiagnosisMode.BIRADS5: (0.62, 0.21, 0.07, 0.07, 0.03),
    DiagnosisMode.PATHOLOGY3: (0.62, 0.28, 0.10),
}
DENSITY_PRIOR = (0.10, 0.40, 0.40, 0.10)
# chance the right breast keeps the left breast's density
SAME_DENSITY = 0.8

BACKGROUND_LEVEL = 6.0
TISSUE_BASE, TISSUE_STEP = 70.0, 35.0
SPECKLE_BASE, SPECKLE_STEP = 5.0, 6.0
BLOB_CONTRAST_BASE, BLOB_CONTRAST_STEP = 20.0, 15.0
MARKER_LEVEL, MARKER_SIZE = 255, 2
PATHOLOGY_BLOBS = (0, 1, 3)
MIN_HEIGHT, MIN_WIDTH = 32, 24


def nominal_blob_count(label: OrdinalLabel, scheme: LabelScheme) -> int:
    """Blobs a breast with this diagnosis carries."""
    if scheme.diagnosis_mode is DiagnosisMode.PATHOLOGY3:
        return PATHOLOGY_BLOBS[label.index]
    return min(label.index, 3)


def blob_contrast(label: OrdinalLabel) -> float:
    return BLOB_CONTRAST_BASE + BLOB_CONTRAST_STEP * label.index


@dataclass
class Blob:
    cx: float
    cy: float
    radius: float

    def to_list(self) -> List[float]:
        return [round(self.cx, 3), round(self.cy, 3), round(self.radius, 3)]


@dataclass
class ImageTruth:
    """What was actually drawn into one image."""
    bbox: BoundingBox
    blobs: List[Blob]
    nominal_blobs: int
    blob_ids: List[int]
    diagnosis: OrdinalLabel
    density: DensityLabel
    apparent_density: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bbox": list(self.bbox.as_tuple()),
            "blobs": [b.to_list() for b in self.blobs],
            "nominal_blobs": self.nominal_blobs,
            "blob_ids": self.blob_ids,
            "diagnosis": self.diagnosis.render(),
            "density": self.density.render(),
            "apparent_density": round(self.apparent_density, 3),
        }


@dataclass
class SynthStudy:
    study_id: str
    images: Dict[ViewTag, GrayImage] = field(default_factory=dict)
    truth: Dict[ViewTag, ImageTruth] = field(default_factory=dict)


def _check_size(cfg: SynthConfig) -> None:
    if cfg.height < MIN_HEIGHT or cfg.width < MIN_WIDTH:
        raise ConfigError(f"synth image {cfg.height}x{cfg.width} is too small to place lesions "
                          f"(need at least {MIN_HEIGHT}x{MIN_WIDTH})")


def _breast_mask(rng: np.random.Generator, cfg: SynthConfig, laterality: Laterality):
    """Half-ellipse mask plus its geometry (anchor x, center y, semi-axes)."""
    h, w = cfg.height, cfg.width
    ax = rng.uniform(0.60, 0.85) * w
    ay = rng.uniform(0.36, 0.45) * h
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    anchor = 0.0 if laterality is Laterality.R else float(w)
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx + 0.5 - anchor
    py = yy + 0.5 - cy
    mask = (px / ax) ** 2 + (py / ay) ** 2 <= 1.0
    return mask, (anchor, cy, ax, ay)


def _place_blob(rng: np.random.Generator, geometry, cfg: SynthConfig) -> Blob:
    anchor, cy, ax, ay = geometry
    scale = min(cfg.height / 128.0, cfg.width / 96.0)
    radius = rng.uniform(3.0, 6.0) * max(scale, 0.5)
    # sample inside the inner 60% of the ellipse so the blob stays in tissue
    rho = 0.6 * np.sqrt(rng.uniform(0.05, 1.0))
    theta = rng.uniform(-np.pi / 2, np.pi / 2)
    dx = rho * ax * np.cos(theta)
    cx = anchor + dx if anchor == 0.0 else anchor - dx
    return Blob(cx=float(cx), cy=float(cy + rho * ay * np.sin(theta)), radius=float(radius))


def apparent_density(rng: np.random.Generator, density: DensityLabel, jitter: float) -> float:
    """
    Density index one view shows: the breast's index plus N(0, jitter),
    clipped to half a class beyond either end of the scale.
    """
    value = density.index + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
    return float(np.clip(value, -0.5, len(DensityLabel) - 0.5))


def _draw_marker(pixels: np.ndarray, bbox: BoundingBox, laterality: Laterality) -> None:
    x = bbox.x1 - MARKER_SIZE if laterality is Laterality.R else bbox.x0
    pixels[bbox.y0:bbox.y0 + MARKER_SIZE, x:x + MARKER_SIZE] = MARKER_LEVEL


def _render_view(rng: np.random.Generator, cfg: SynthConfig, laterality: Laterality,
                 density: float, n_blobs: int, contrast: float):
    mask, geometry = _breast_mask(rng, cfg, laterality)
    blobs = [_place_blob(rng, geometry, cfg) for _ in range(n_blobs)]
    canvas = np.full((cfg.height, cfg.width), BACKGROUND_LEVEL)
    speckle = max(1.0, SPECKLE_BASE + SPECKLE_STEP * density)
    tissue = TISSUE_BASE + TISSUE_STEP * density + rng.normal(0.0, speckle, mask.shape)
    canvas = np.where(mask, tissue, canvas)

    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width]
    for blob in blobs:
        dist2 = (xx + 0.5 - blob.cx) ** 2 + (yy + 0.5 - blob.cy) ** 2
        canvas += mask * contrast * np.exp(-dist2 / (2.0 * (blob.radius / 1.5) ** 2))

    canvas += rng.normal(0.0, cfg.noise_sigma, canvas.shape)
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    rows, cols = np.nonzero(mask)
    bbox = BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    _draw_marker(pixels, bbox, laterality)
    return GrayImage.from_array(pixels), bbox, blobs


def generate_study(rng: np.random.Generator, study_id: str, cfg: SynthConfig,
                   diagnosis: Dict[Laterality, OrdinalLabel],
                   density: Dict[Laterality, DensityLabel]) -> SynthStudy:
    """
    Render the four views of one study.

    Args:
        rng: Generator owned by this study.
        study_id: Identifier written into the truth record.
        cfg: Image size, visibility and noise settings.
        diagnosis: Breast diagnosis per side.
        density: Breast density per side.

    Returns:
        SynthStudy with one image and one truth record per view. The
        per-image diagnosis is the breast's label when at least one of its
        blobs is visible in that view and the lowest class otherwise.
    """
    _check_size(cfg)
    scheme = LabelScheme.from_name(cfg.scheme)
    lowest = scheme.diagnosis_type.from_index(0)
    study = SynthStudy(study_id=study_id)

    for lat in Laterality:
        label = diagnosis[lat]
        if not isinstance(label, scheme.diagnosis_type):
            raise ConfigError(f"{study_id}: label {label!r} does not belong to scheme {scheme.name}")
        n_blobs = nominal_blob_count(label, scheme)
        visible = rng.random((n_blobs, 2)) < cfg.p_vis
        for b in range(n_blobs):
            if not visible[b].any():
                visible[b, rng.integers(2)] = True

        for v, view in enumerate((ViewKind.CC, ViewKind.MLO)):
            shown_density = apparent_density(rng, density[lat], cfg.density_jitter)
            image, bbox, shown = _render_view(rng, cfg, lat, shown_density,
                                              int(visible[:, v].sum()), blob_contrast(label))
            tag = ViewTag(lat, view)
            study.images[tag] = image
            study.truth[tag] = ImageTruth(bbox=bbox, blobs=shown, nominal_blobs=n_blobs,
                                          blob_ids=[int(b) for b in np.flatnonzero(visible[:, v])],
                                          diagnosis=label if shown else lowest,
                                          density=density[lat], apparent_density=shown_density)
    return study


def sample_labels(rng: np.random.Generator, scheme: LabelScheme):
    """Breast diagnosis and density for both sides of one study."""
    diag_type = scheme.diagnosis_type
    prior = DIAGNOSIS_PRIORS[scheme.diagnosis_mode]
    diagnosis = {lat: diag_type.from_index(int(rng.choice(len(prior), p=prior))) for lat in Laterality}

    left = int(rng.choice(len(DENSITY_PRIOR), p=DENSITY_PRIOR))
    right = left
    if rng.random() >= SAME_DENSITY:
        right = int(np.clip(left + (1 if rng.random() < 0.5 else -1), 0, len(DENSITY_PRIOR) - 1))
    density = {Laterality.L: DensityLabel.from_index(left), Laterality.R: DensityLabel.from_index(right)}
    return diagnosis, density


def study_splits(cfg: SynthConfig) -> List[Tuple[str, str]]:
    """(study_id, split) for every study, train first."""
    plan = []
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        plan.extend([split] * count)
    width = max(5, len(str(len(plan))))
    return [(f"S{i:0{width}d}", split) for i, split in enumerate(plan)]


def image_name(study_id: str, tag: ViewTag) -> str:
    return f"{study_id}_{tag.laterality.value}_{tag.view.value}.pgm"


@dataclass
class SynthDataset:
    manifest: Manifest
    manifest_path: Path
    truth_path: Path
    truth: Dict[str, Dict[str, Any]]


def generate_dataset(cfg: SynthConfig, out_dir: Union[str, Path]) -> SynthDataset:
    """
    Write a complete synthetic dataset under ``out_dir``.

    Layout: ``images/<study>_<lat>_<view>.pgm``, ``manifest.csv`` (with the
    split column) and ``synth_truth.json``. Every study draws from its own
    seed substream, so the output does not depend on generation order.

    Raises:
        ConfigError: image size too small.
        DataIOError: output not writable.
    """
    _check_size(cfg)
    out_dir = Path(out_dir)
    scheme = LabelScheme.from_name(cfg.scheme)
    plan = study_splits(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(len(plan))

    rows: List[ImageRecord] = []
    truth: Dict[str, Dict[str, Any]] = {}
    for (study_id, split), stream in zip(plan, streams):
        rng = np.random.default_rng(stream)
        diagnosis, density = sample_labels(rng, scheme)
        study = generate_study(rng, study_id, cfg, diagnosis, density)
        for tag in ALL_VIEWS:
            rel = f"images/{image_name(study_id, tag)}"
            write_pgm(study.images[tag], out_dir / rel)
            record_truth = study.truth[tag]
            truth[f"{study_id}_{tag.laterality.value}_{tag.view.value}"] = record_truth.to_dict()
            rows.append(ImageRecord(study_id=study_id, laterality=tag.laterality, view=tag.view,
                                    image_path=rel, diagnosis=record_truth.diagnosis,
                                    density=record_truth.density, split=split))

    manifest = Manifest(rows=rows, scheme=scheme, split_column_present=True, base_dir=out_dir)
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest, manifest_path)

    truth_path = out_dir / "synth_truth.json"
    document = {"config": cfg.model_dump(), "images": truth}
    try:
        truth_path.write_text(json.dumps(document, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"Cannot write {truth_path}: {exc}") from exc

    report = validate_dataset(manifest)
    logger.info("Generated %d studies (%d images) in %s; %d validation findings",
                len(plan), len(rows), out_dir, len(report.findings))
    return SynthDataset(manifest=manifest, manifest_path=manifest_path,
                        truth_path=truth_path, truth=truth)


def load_truth(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"Cannot read synthetic truth {path}: {exc}") from exc
