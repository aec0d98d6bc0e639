"""
Per-view feature extractor.

A raster is summarized as a grid of cell statistics, standardized per channel
with means and deviations fitted on the training images; a shared affine layer
with ReLU turns every cell into a C-channel hidden vector, and the hidden
grid is average-pooled into the exported feature vector. Two affine heads
(diagnosis and density) sit on top of the pooled vector during training and
are dropped when features are extracted.

Training follows a fixed recipe: summed cross-entropy of both heads, SGD with
momentum, per-epoch cosine annealing, and early stopping on validation macro-F1.
"""

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.preprocessing import StandardScaler

from ..config.settings import ExtractorConfig
from .errors import ConfigError, DataIOError, FormatVersionError, RoutingError, TrainingRefused
from .labels import LabelKind, LabelScheme, Laterality, ViewKind, ViewTag
from .metrics import macro_f1

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 2
STATS_PER_CELL = 4
PARAM_NAMES = ("W1", "b1", "W_diag", "b_diag", "W_dens", "b_dens")
SCALER_NAMES = ("stat_mean", "stat_scale")

Params = Dict[str, np.ndarray]


def _cell_edges(size: int, cells: int) -> List[Tuple[int, int]]:
    step = -(-size // cells)
    edges = []
    for i in range(cells):
        start = min(i * step, size - 1)
        stop = max(min((i + 1) * step, size), start + 1)
        edges.append((start, stop))
    return edges


def cell_statistics(raster: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """
    Per-cell summary of a normalized raster.

    Cells are ceil-sized; trailing cells are clamped to the raster edge. Each
    cell yields (mean intensity, intensity std, mean central-difference
    gradient magnitude, fraction of pixels above the raster's global mean).

    Returns:
        Array of shape (grid_h, grid_w, 4).
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 2:
        raise ValueError("Raster must be two-dimensional")
    gy, gx = np.gradient(raster) if min(raster.shape) > 1 else (np.zeros_like(raster),) * 2
    magnitude = np.hypot(gx, gy)
    above = raster > raster.mean()

    stats = np.empty((grid_h, grid_w, STATS_PER_CELL), dtype=np.float64)
    for i, (r0, r1) in enumerate(_cell_edges(raster.shape[0], grid_h)):
        for j, (c0, c1) in enumerate(_cell_edges(raster.shape[1], grid_w)):
            cell = raster[r0:r1, c0:c1]
            stats[i, j, 0] = cell.mean()
            stats[i, j, 1] = cell.std()
            stats[i, j, 2] = magnitude[r0:r1, c0:c1].mean()
            stats[i, j, 3] = above[r0:r1, c0:c1].mean()
    return stats


@dataclass
class ExtractorModel:
    """
    Weights of one per-view extractor plus the config it was trained with.

    ``stat_mean`` and ``stat_scale`` standardize the four cell-statistic
    channels before the hidden layer; they are fitted on the training images.
    """
    params: Params
    view_tag: ViewTag
    config: ExtractorConfig
    scheme: LabelScheme
    stat_mean: np.ndarray = field(default_factory=lambda: np.zeros(STATS_PER_CELL))
    stat_scale: np.ndarray = field(default_factory=lambda: np.ones(STATS_PER_CELL))

    def standardize(self, stats: np.ndarray) -> np.ndarray:
        """Apply the per-channel training standardization to a (..., 4) tensor."""
        return (stats - self.stat_mean) / self.stat_scale

    @property
    def channels(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def n_diagnosis(self) -> int:
        return self.params["W_diag"].shape[1]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(cfg: ExtractorConfig, scheme: LabelScheme, view_tag: ViewTag,
               rng: Optional[np.random.Generator] = None) -> ExtractorModel:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    c, k_diag, k_dens = cfg.channels, scheme.diagnosis_classes, scheme.density_classes
    params = {
        "W1": _glorot(rng, STATS_PER_CELL, c),
        "b1": np.zeros(c),
        "W_diag": _glorot(rng, c, k_diag),
        "b_diag": np.zeros(k_diag),
        "W_dens": _glorot(rng, c, k_dens),
        "b_dens": np.zeros(k_dens),
    }
    return ExtractorModel(params=params, view_tag=view_tag, config=cfg, scheme=scheme)


def fit_stat_scaler(stats: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over every cell of every image; constant channels keep scale 1."""
    scaler = StandardScaler().fit(np.asarray(stats, dtype=np.float64).reshape(-1, STATS_PER_CELL))
    return scaler.mean_.copy(), scaler.scale_.copy()


def _forward_batch(params: Params, stats: np.ndarray):
    """stats: standardized (B, G, 4) -> pre-activations, pooled features and both logit sets."""
    pre = stats @ params["W1"] + params["b1"]
    pooled = np.maximum(pre, 0.0).mean(axis=1)
    logits_diag = pooled @ params["W_diag"] + params["b_diag"]
    logits_dens = pooled @ params["W_dens"] + params["b_dens"]
    return pre, pooled, logits_diag, logits_dens


def forward_stats(model: ExtractorModel, stats: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward pass from a (grid_h, grid_w, 4) statistics tensor."""
    cfg = model.config
    if stats.shape != (cfg.grid_h, cfg.grid_w, STATS_PER_CELL):
        raise ValueError(f"Statistics shape {stats.shape} does not match the model grid "
                         f"({cfg.grid_h}, {cfg.grid_w}, {STATS_PER_CELL})")
    _, pooled, logits_diag, logits_dens = _forward_batch(
        model.params, model.standardize(stats.reshape(1, -1, STATS_PER_CELL)))
    return pooled[0], logits_diag[0], logits_dens[0]


def forward(model: ExtractorModel, raster: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pooled feature vector and head logits of one raster.

    The hidden grid is relu(stats @ W1 + b1); the feature is its spatial mean.
    """
    stats = cell_statistics(raster, model.config.grid_h, model.config.grid_w)
    return forward_stats(model, stats)


def softmax_cross_entropy(logits: np.ndarray, target: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy of one sample and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise ValueError("Need a vector of at least two logits")
    if not 0 <= target < logits.size:
        raise IndexError(f"Target {target} outside [0, {logits.size})")
    log_p = log_softmax(logits)
    grad = np.exp(log_p)
    grad[target] -= 1.0
    return float(-log_p[target]), grad


def _batch_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and d(mean loss)/d(logits)."""
    log_p = log_softmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    loss = -log_p[rows, targets].mean()
    grad = softmax(logits, axis=1)
    grad[rows, targets] -= 1.0
    return float(loss), grad / logits.shape[0]


def loss_and_grads(params: Params, stats: np.ndarray, y_diag: np.ndarray,
                   y_dens: np.ndarray) -> Tuple[float, Params]:
    """Summed mean cross-entropy of both heads and its gradient for every weight group."""
    pre, pooled, logits_diag, logits_dens = _forward_batch(params, stats)
    loss_diag, d_diag = _batch_cross_entropy(logits_diag, y_diag)
    loss_dens, d_dens = _batch_cross_entropy(logits_dens, y_dens)

    d_pooled = d_diag @ params["W_diag"].T + d_dens @ params["W_dens"].T
    d_pre = (d_pooled[:, None, :] / stats.shape[1]) * (pre > 0.0)
    grads = {
        "W1": np.einsum("bgs,bgc->sc", stats, d_pre),
        "b1": d_pre.sum(axis=(0, 1)),
        "W_diag": pooled.T @ d_diag,
        "b_diag": d_diag.sum(axis=0),
        "W_dens": pooled.T @ d_dens,
        "b_dens": d_dens.sum(axis=0),
    }
    return loss_diag + loss_dens, grads


def cosine_lr(t: float, total: int, lr_max: float, lr_min: float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2"""
    if total <= 0:
        raise ConfigError("Cosine schedule needs a positive number of epochs")
    if not 0 <= t <= total:
        raise ValueError(f"Epoch index {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def sgd_momentum_step(params: Params, grads: Params, velocity: Params, lr: float,
                      momentum: float = 0.9) -> Tuple[Params, Params]:
    """
    One SGD step with momentum: v <- momentum * v + g, p <- p - lr * v.

    Raises:
        TrainingRefused: a gradient contains NaN or infinity.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"Gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingRefused(f"Non-finite gradient in {name} "
                                  f"(max |g| = {np.nanmax(np.abs(g))})")
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


class EarlyStopping:
    """Stops after ``patience`` epochs without a strictly better score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for 1-based ``epoch``; True once patience is exhausted."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_score: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_score(self) -> float:
        return self.epochs[self.best_epoch - 1].val_score

    def to_dict(self) -> Dict[str, Any]:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [vars(e) for e in self.epochs],
        }


@dataclass
class ViewDataset:
    """Cell statistics and labels of the images of one view."""
    view_tag: ViewTag
    stats: np.ndarray
    y_diag: np.ndarray
    y_dens: np.ndarray
    study_ids: List[str]

    def __len__(self) -> int:
        return len(self.study_ids)

    @classmethod
    def build(cls, view_tag: ViewTag, rasters: Sequence[np.ndarray], y_diag: Sequence[int],
              y_dens: Sequence[int], study_ids: Sequence[str], cfg: ExtractorConfig) -> "ViewDataset":
        grid = cfg.grid_h * cfg.grid_w
        stats = np.stack([cell_statistics(r, cfg.grid_h, cfg.grid_w).reshape(grid, STATS_PER_CELL)
                          for r in rasters]) if len(rasters) else np.zeros((0, grid, STATS_PER_CELL))
        return cls(view_tag=view_tag, stats=stats,
                   y_diag=np.asarray(y_diag, dtype=np.intp),
                   y_dens=np.asarray(y_dens, dtype=np.intp),
                   study_ids=list(study_ids))


def predict_classes(model: ExtractorModel, dataset: ViewDataset) -> Tuple[np.ndarray, np.ndarray]:
    _, _, logits_diag, logits_dens = _forward_batch(model.params, model.standardize(dataset.stats))
    return logits_diag.argmax(axis=1), logits_dens.argmax(axis=1)


def _validation_score(model: ExtractorModel, dataset: ViewDataset) -> float:
    """Mean of the diagnosis-head and density-head macro-F1."""
    pred_diag, pred_dens = predict_classes(model, dataset)
    scheme = model.scheme
    return 0.5 * (macro_f1(pred_diag, dataset.y_diag, scheme.n_classes(LabelKind.DIAGNOSIS))
                  + macro_f1(pred_dens, dataset.y_dens, scheme.n_classes(LabelKind.DENSITY)))


def train_extractor(train: ViewDataset, val: ViewDataset, cfg: ExtractorConfig,
                    scheme: LabelScheme) -> Tuple[ExtractorModel, TrainLog]:
    """
    Train one view's extractor and return the weights of its best validation epoch.

    Args:
        train: Training images of the view.
        val: Validation images of the same view.
        cfg: Extractor hyperparameters.
        scheme: Label scheme (sets the diagnosis head size).

    Returns:
        (model, log)

    Raises:
        TrainingRefused: empty training set or fewer than two diagnosis classes.
        RoutingError: the two datasets belong to different views.
    """
    if len(train) == 0:
        raise TrainingRefused(f"No training images for {train.view_tag.name}")
    if len(np.unique(train.y_diag)) < 2:
        raise TrainingRefused(
            f"{train.view_tag.name}: training set holds a single diagnosis class "
            f"({int(train.y_diag[0])}); refusing to train")
    if val.view_tag != train.view_tag:
        raise RoutingError(f"Validation set is {val.view_tag.name}, training set is {train.view_tag.name}")
    if len(val) == 0:
        logger.warning("%s: empty validation set; scoring on the training set", train.view_tag.name)
        val = train

    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, scheme, train.view_tag, rng)
    model.stat_mean, model.stat_scale = fit_stat_scaler(train.stats)
    train_stats = model.standardize(train.stats)
    params = model.params
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    stopper = EarlyStopping(cfg.patience)
    log = TrainLog()
    best_params = {name: p.copy() for name, p in params.items()}
    n = len(train)

    for t in range(cfg.epochs):
        epoch = t + 1
        lr = cosine_lr(t, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, train_stats[batch],
                                         train.y_diag[batch], train.y_dens[batch])
            if not math.isfinite(loss):
                raise TrainingRefused(f"{train.view_tag.name}: loss diverged at epoch {epoch}")
            params, velocity = sgd_momentum_step(params, grads, velocity, lr, cfg.momentum)
            total_loss += loss * len(batch)

        model.params = params
        score = _validation_score(model, val)
        log.epochs.append(EpochRecord(epoch=epoch, lr=lr, train_loss=total_loss / n, val_score=score))
        logger.info("%s epoch %d lr=%.6g loss=%.4f val_macro_f1=%.4f",
                    train.view_tag.name, epoch, lr, total_loss / n, score)

        stop = stopper.update(epoch, score)
        if stopper.best_epoch == epoch:
            best_params = {name: p.copy() for name, p in params.items()}
        if stop and epoch < cfg.epochs:
            log.stopped_early = True
            logger.info("%s: no improvement for %d epochs, stopping at epoch %d",
                        train.view_tag.name, cfg.patience, epoch)
            break

    log.best_epoch = stopper.best_epoch
    model.params = best_params
    return model, log


@dataclass
class FeatureVector:
    """One C-dimensional feature vector and the image (or breast side) it came from."""
    values: np.ndarray
    study_id: str
    laterality: Laterality
    view: Optional[ViewKind]
    diagnosis: Optional[int] = None
    density: Optional[int] = None


@dataclass
class FeatureMatrix:
    """
    N x C feature table with aligned labels and source keys.

    ``views`` is None for rows that fuse both views of a breast; ``views_present``
    is a bitmask (1 = CC, 2 = MLO).
    """
    values: np.ndarray
    study_ids: List[str]
    lateralities: List[Laterality]
    views: List[Optional[ViewKind]]
    y_diag: np.ndarray
    y_dens: np.ndarray
    views_present: np.ndarray
    scheme: LabelScheme

    def __post_init__(self):
        n = self.values.shape[0]
        if not (len(self.study_ids) == len(self.lateralities) == len(self.views)
                == len(self.y_diag) == len(self.y_dens) == len(self.views_present) == n):
            raise ValueError("Feature matrix columns have different lengths")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, n_features: int, scheme: LabelScheme) -> "FeatureMatrix":
        return cls(values=np.zeros((0, n_features), dtype=np.float32), study_ids=[],
                   lateralities=[], views=[], y_diag=np.zeros(0, dtype=np.intp),
                   y_dens=np.zeros(0, dtype=np.intp),
                   views_present=np.zeros(0, dtype=np.uint8), scheme=scheme)

    def row(self, k: int) -> FeatureVector:
        return FeatureVector(values=self.values[k], study_id=self.study_ids[k],
                             laterality=self.lateralities[k], view=self.views[k],
                             diagnosis=int(self.y_diag[k]), density=int(self.y_dens[k]))


VIEW_BIT = {ViewKind.CC: 1, ViewKind.MLO: 2}


def extract_features(model: ExtractorModel, dataset: ViewDataset) -> FeatureMatrix:
    """
    Pooled features of every image in ``dataset``, in input order.

    Raises:
        RoutingError: the dataset belongs to another view than the model.
    """
    if dataset.view_tag != model.view_tag:
        raise RoutingError(f"Model for {model.view_tag.name} cannot extract {dataset.view_tag.name} images")
    if len(dataset) == 0:
        return FeatureMatrix.empty(model.channels, model.scheme)
    _, pooled, _, _ = _forward_batch(model.params, model.standardize(dataset.stats))
    n = len(dataset)
    return FeatureMatrix(
        values=pooled.astype(np.float32),
        study_ids=list(dataset.study_ids),
        lateralities=[model.view_tag.laterality] * n,
        views=[model.view_tag.view] * n,
        y_diag=dataset.y_diag.copy(),
        y_dens=dataset.y_dens.copy(),
        views_present=np.full(n, VIEW_BIT[model.view_tag.view], dtype=np.uint8),
        scheme=model.scheme,
    )


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_model(model: ExtractorModel, path: Union[str, Path]) -> None:
    """
    Write an ``.npz`` container: one little-endian float64 array per weight
    group and per standardization vector plus a ``meta`` entry holding JSON (format version, view, scheme, config).
    """
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "view_tag": model.view_tag.name,
        "scheme": model.scheme.name,
        "config": model.config.model_dump(),
    }
    arrays = {name: np.ascontiguousarray(model.params[name], dtype="<f8") for name in PARAM_NAMES}
    arrays["stat_mean"] = np.ascontiguousarray(model.stat_mean, dtype="<f8")
    arrays["stat_scale"] = np.ascontiguousarray(model.stat_scale, dtype="<f8")
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as archive:
            for name, array in arrays.items():
                buffer = io.BytesIO()
                np.lib.format.write_array(buffer, array, allow_pickle=False)
                archive.writestr(_zip_entry(f"{name}.npy"), buffer.getvalue())
    except OSError as exc:
        raise DataIOError(f"Cannot write model {path}: {exc}") from exc


def load_model(path: Union[str, Path]) -> ExtractorModel:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format_version") != MODEL_FORMAT_VERSION:
                raise FormatVersionError(
                    f"{path}: extractor format version {meta.get('format_version')}, "
                    f"expected {MODEL_FORMAT_VERSION}")
            params = {name: data[name].astype(np.float64) for name in PARAM_NAMES}
            stat_mean, stat_scale = (data[name].astype(np.float64) for name in SCALER_NAMES)
    except (OSError, zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DataIOError(f"Cannot read extractor model {path}: {exc}") from exc
    return ExtractorModel(params=params, view_tag=ViewTag.parse(meta["view_tag"]),
                          config=ExtractorConfig.model_validate(meta["config"]),
                          scheme=LabelScheme.from_name(meta["scheme"]),
                          stat_mean=stat_mean, stat_scale=stat_scale)


def save_train_log(log: TrainLog, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(log.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"Cannot write training log {path}: {exc}") from exc
