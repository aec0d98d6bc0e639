"""
High-level pipeline interface.

Wraps every stage (split, extractor training, extraction, fusion, boosting,
evaluation) behind one object that knows the output directory layout, so the
command line and tests drive the same code.

Output files under ``out_dir``:

    extractor_<VIEW>.npz, extractor_<VIEW>.log.json
    features_<VIEW>_<split>.mfv
    table_<mode>_<split>.mfv            mode is "single" or "multi"
    gbdt_<mode>_diagnosis.json, gbdt_<mode>_density.json
    report_<mode>.txt, report_<mode>.json
    comparison.txt, comparison.json
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config.settings import ExtractorConfig, PipelineConfig
from .errors import ConfigError, DataIOError
from .extractor import (
    ExtractorModel,
    FeatureMatrix,
    TrainLog,
    ViewDataset,
    cell_statistics,
    extract_features,
    load_model,
    save_model,
    save_train_log,
    train_extractor,
)
from .feature_io import read_features, write_features
from .fusion import build_image_table, build_training_table
from .gbdt import Forest, load_forest, predict, save_forest, train
from .ingestion import SPLITS, Manifest, count_table, load_image, validate_dataset, write_manifest
from .labels import ALL_VIEWS, ImageRecord, LabelKind, LabelScheme, ViewTag
from .metrics import (
    ImagePrediction,
    LevelReports,
    SidePrediction,
    evaluate_levels,
    reduce_image_predictions,
    render_comparison,
    render_reports,
)
from .preprocess import preprocess_image
from .stratify import SplitRatios, split_sizes, stratified_split

logger = logging.getLogger(__name__)

MODES = ("single", "multi")
TARGETS = ("diagnosis", "density")


def view_seed(seed: int, tag: ViewTag) -> int:
    """Seed of one view's extractor; independent of training order."""
    return int(np.random.SeedSequence([seed, ALL_VIEWS.index(tag)]).generate_state(1)[0])


def _train_view_job(train_set: ViewDataset, val_set: ViewDataset, cfg: ExtractorConfig,
                    scheme: LabelScheme) -> Tuple[ExtractorModel, TrainLog]:
    return train_extractor(train_set, val_set, cfg, scheme)


@dataclass
class ComparisonReport:
    """Single-view and multi-view reports on the same test split."""
    single: LevelReports
    multi: LevelReports

    def deltas(self) -> Dict[str, Dict[str, float]]:
        single, multi = self.single.macro(), self.multi.macro()
        return {target: {level: multi[target][level] - single[target][level] for level in multi[target]}
                for target in multi}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "single_view": self.single.to_dict(),
            "multi_view": self.multi.to_dict(),
            "delta": self.deltas(),
        }

    def render(self) -> str:
        return render_comparison(self.single, self.multi)


class MammoPipeline:
    """
    Two-stage multi-view pipeline bound to one configuration and output directory.
    """

    def __init__(self, config: PipelineConfig, out_dir: Union[str, Path]):
        self.config = config
        self.out_dir = Path(out_dir)
        self.scheme = LabelScheme.from_name(config.scheme)
        self._stats: Dict[Tuple, np.ndarray] = {}

    # -- file layout -----------------------------------------------------

    def model_path(self, tag: ViewTag) -> Path:
        return self.out_dir / f"extractor_{tag.name}.npz"

    def features_path(self, tag: ViewTag, split: str) -> Path:
        return self.out_dir / f"features_{tag.name}_{split}.mfv"

    def table_path(self, mode: str, split: str) -> Path:
        return self.out_dir / f"table_{mode}_{split}.mfv"

    def forest_path(self, mode: str, target: str) -> Path:
        return self.out_dir / f"gbdt_{mode}_{target}.json"

    def _write_json(self, path: Path, data: Any) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"Cannot write {path}: {exc}") from exc

    def _write_text(self, path: Path, text: str) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"Cannot write {path}: {exc}") from exc

    # -- splitting -------------------------------------------------------

    def split(self, manifest: Manifest, manifest_path: Union[str, Path], force: bool = False) -> Manifest:
        """Assign splits by multilabel stratification and rewrite the manifest."""
        if manifest.split_column_present and not force:
            raise ConfigError(f"{manifest_path} already has a split column; pass --force to replace it")
        ratios = SplitRatios.from_config(self.config.stratify)
        assignment = stratified_split(manifest.studies(), ratios, self.config.stratify.seed)
        result = manifest.with_splits(assignment)
        write_manifest(result, manifest_path)
        logger.info("Split sizes: %s", split_sizes(assignment))
        return result

    def split_table(self, manifest: Manifest) -> str:
        return count_table(validate_dataset(manifest))

    # -- extractor -------------------------------------------------------

    def _record_stats(self, manifest: Manifest, record: ImageRecord) -> np.ndarray:
        if record.key not in self._stats:
            cfg = self.config.extractor
            image = load_image(manifest.resolve(record))
            raster = preprocess_image(image, self.config.preprocess, roi=record.roi)
            self._stats[record.key] = cell_statistics(raster, cfg.grid_h, cfg.grid_w).reshape(-1, 4)
        return self._stats[record.key]

    def view_dataset(self, manifest: Manifest, tag: ViewTag, split: str) -> ViewDataset:
        """Preprocessed cell statistics of every ``tag`` image in ``split``."""
        records = [r for r in manifest.rows
                   if r.split == split and r.laterality is tag.laterality and r.view is tag.view]
        cfg = self.config.extractor
        if records:
            stats = np.stack([self._record_stats(manifest, r) for r in records])
        else:
            stats = np.zeros((0, cfg.grid_h * cfg.grid_w, 4))
        return ViewDataset(view_tag=tag, stats=stats,
                           y_diag=np.array([r.diagnosis.index for r in records], dtype=np.intp),
                           y_dens=np.array([r.density.index for r in records], dtype=np.intp),
                           study_ids=[r.study_id for r in records])

    def _require_splits(self, manifest: Manifest) -> None:
        if not manifest.split_column_present:
            raise ConfigError("Manifest has no split column; run the split command first")

    def train_extractors(self, manifest: Manifest, views: Sequence[ViewTag] = ALL_VIEWS,
                         jobs: int = 1) -> Dict[ViewTag, Tuple[ExtractorModel, TrainLog]]:
        """
        Train one extractor per view on split=train, selecting epochs on split=val.

        With ``jobs > 1`` the views train in separate processes; results are
        identical to the sequential run because every view has its own seed.
        """
        self._require_splits(manifest)
        tasks = []
        for tag in views:
            cfg = self.config.extractor.model_copy(update={"seed": view_seed(self.config.extractor.seed, tag)})
            tasks.append((self.view_dataset(manifest, tag, "train"),
                          self.view_dataset(manifest, tag, "val"), cfg, self.scheme))

        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
                outputs = list(pool.map(_train_view_job, *zip(*tasks)))
        else:
            outputs = [_train_view_job(*task) for task in tasks]

        results = {}
        for tag, (model, log) in zip(views, outputs):
            save_model(model, self.model_path(tag))
            save_train_log(log, self.model_path(tag).with_suffix(".log.json"))
            logger.info("%s: best epoch %d (val macro-F1 %.4f)%s", tag.name, log.best_epoch,
                        log.best_score, ", stopped early" if log.stopped_early else "")
            results[tag] = (model, log)
        return results

    def extract(self, manifest: Manifest, views: Sequence[ViewTag] = ALL_VIEWS) -> Dict[Tuple[ViewTag, str], FeatureMatrix]:
        """Write the features of every split for each view's images."""
        self._require_splits(manifest)
        out = {}
        for tag in views:
            model = load_model(self.model_path(tag))
            for split in SPLITS:
                matrix = extract_features(model, self.view_dataset(manifest, tag, split))
                write_features(matrix, self.features_path(tag, split))
                out[(tag, split)] = matrix
        return out

    # -- fusion ----------------------------------------------------------

    def fuse(self, mode: str, split: str, manifest: Optional[Manifest] = None) -> FeatureMatrix:
        """Build the per-side (multi) or per-image (single) table of one split."""
        if mode not in MODES:
            raise ConfigError(f"Unknown mode {mode!r}; expected one of {MODES}")
        features = {tag: read_features(self.features_path(tag, split)) for tag in ALL_VIEWS}
        studies = manifest.studies() if manifest is not None else None
        builder = build_training_table if mode == "multi" else build_image_table
        table = builder(features, studies)
        write_features(table, self.table_path(mode, split))
        return table

    def fuse_all(self, mode: str, manifest: Optional[Manifest] = None) -> Dict[str, FeatureMatrix]:
        return {split: self.fuse(mode, split, manifest) for split in SPLITS}

    # -- second stage ----------------------------------------------------

    def train_gbdt(self, mode: str) -> Dict[str, Forest]:
        """Train independent diagnosis and density forests on one table type."""
        train_table = read_features(self.table_path(mode, "train"))
        val_path = self.table_path(mode, "val")
        val_table = read_features(val_path) if val_path.exists() else None
        forests = {}
        for target, kind in zip(TARGETS, (LabelKind.DIAGNOSIS, LabelKind.DENSITY)):
            y = train_table.y_diag if kind is LabelKind.DIAGNOSIS else train_table.y_dens
            X_val = y_val = None
            if val_table is not None and len(val_table):
                X_val = val_table.values
                y_val = val_table.y_diag if kind is LabelKind.DIAGNOSIS else val_table.y_dens
            forest = train(train_table.values, y, self.config.gbdt,
                           n_classes=self.scheme.n_classes(kind), X_val=X_val, y_val=y_val)
            save_forest(forest, self.forest_path(mode, target))
            forests[target] = forest
        return forests

    def predict_sides(self, mode: str, split: str = "test") -> List[SidePrediction]:
        """Breast-side predictions of one pipeline; single-view image predictions are reduced by max."""
        table = read_features(self.table_path(mode, split))
        if not len(table):
            return []
        diag = predict(load_forest(self.forest_path(mode, "diagnosis")), table.values)
        dens = predict(load_forest(self.forest_path(mode, "density")), table.values)
        if mode == "multi":
            return [SidePrediction(study_id=table.study_ids[i], laterality=table.lateralities[i],
                                   pred_diag=int(diag[i]), true_diag=int(table.y_diag[i]),
                                   pred_dens=int(dens[i]), true_dens=int(table.y_dens[i]))
                    for i in range(len(table))]
        images = [ImagePrediction(study_id=table.study_ids[i], laterality=table.lateralities[i],
                                  view=table.views[i], pred_diag=int(diag[i]),
                                  true_diag=int(table.y_diag[i]), pred_dens=int(dens[i]),
                                  true_dens=int(table.y_dens[i]))
                  for i in range(len(table))]
        return reduce_image_predictions(images)

    def evaluate(self, mode: str, split: str = "test",
                 manifest: Optional[Manifest] = None) -> LevelReports:
        study_ids = None
        if manifest is not None:
            study_ids = [r.study_id for r in manifest.rows if r.split == split]
        reports = evaluate_levels(self.predict_sides(mode, split), self.scheme, study_ids)
        title = f"{'Multi' if mode == 'multi' else 'Single'}-view model ({split})"
        self._write_text(self.out_dir / f"report_{mode}.txt", render_reports(reports, title))
        self._write_json(self.out_dir / f"report_{mode}.json", reports.to_dict())
        return reports

    # -- end to end ------------------------------------------------------

    def compare(self, manifest: Optional[Manifest] = None, split: str = "test") -> ComparisonReport:
        report = ComparisonReport(single=self.evaluate("single", split, manifest),
                                  multi=self.evaluate("multi", split, manifest))
        self._write_text(self.out_dir / "comparison.txt", report.render())
        self._write_json(self.out_dir / "comparison.json", report.to_dict())
        return report

    def run(self, manifest: Manifest, jobs: int = 1) -> ComparisonReport:
        """Both pipelines on the same split and extractor features, then the side-by-side report."""
        self._require_splits(manifest)
        self.train_extractors(manifest, ALL_VIEWS, jobs)
        self.extract(manifest)
        for mode in MODES:
            self.fuse_all(mode, manifest)
            self.train_gbdt(mode)
        report = self.compare(manifest)
        deltas = report.deltas()
        logger.info("Study diagnosis macro-F1 delta %+.4f, side density delta %+.4f",
                    deltas["diagnosis"]["study"], deltas["density"]["side"])
        return report
