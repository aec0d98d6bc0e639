"""
Histogram gradient-boosted trees for multiclass classification.

Features are quantized into at most 255 bins per column. Each boosting round
grows one tree per class on the softmax gradients, leaf-wise: the leaf with the
largest pending split gain is split next until the leaf budget runs out or no
split has positive gain. Leaf values are Newton steps with L2 regularization.
"""

import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from ..config.settings import GbdtConfig
from .errors import DataError, DataIOError, FormatVersionError, TrainingRefused

logger = logging.getLogger(__name__)

FOREST_FORMAT_VERSION = 1
PRIOR_FLOOR = 1e-12


def _check_finite(X: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        row, col = (int(v) for v in bad[0])
        raise DataError(f"Non-finite feature value {X[row, col]}", row=row, column=col)


@dataclass
class BinMapper:
    """Per-feature bin upper boundaries; value x falls in bin #(boundaries < x)."""
    thresholds: List[np.ndarray]
    max_bins: int

    @property
    def n_features(self) -> int:
        return len(self.thresholds)

    def n_bins(self, feature: int) -> int:
        return len(self.thresholds[feature]) + 1

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"Expected {self.n_features} features, got {X.shape[1]}")
        _check_finite(X)
        binned = np.empty(X.shape, dtype=np.uint8)
        for j, bounds in enumerate(self.thresholds):
            binned[:, j] = np.searchsorted(bounds, X[:, j], side="left")
        return binned


def build_bins(X: np.ndarray, max_bins: int = 255) -> BinMapper:
    """
    Quantize each feature column.

    Columns with at most ``max_bins`` distinct values get one bin per value
    (boundaries at midpoints); otherwise boundaries sit at evenly spaced
    quantiles of the distinct values.

    Raises:
        DataError: a non-finite value (row and column are reported).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("Cannot bin an empty feature matrix")
    if not 2 <= max_bins <= 255:
        raise ValueError(f"max_bins must lie in [2, 255], got {max_bins}")
    _check_finite(X)

    thresholds = []
    for j in range(X.shape[1]):
        distinct = np.unique(X[:, j])
        if distinct.size <= max_bins:
            bounds = (distinct[:-1] + distinct[1:]) / 2
        else:
            qs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
            bounds = np.unique(np.quantile(distinct, qs))
        thresholds.append(bounds)
    return BinMapper(thresholds=thresholds, max_bins=max_bins)


def softmax_objective(raw: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and diagonal Hessian of the multiclass log-loss at ``raw``."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp)
    n, k = raw.shape
    if labels.shape != (n,):
        raise ValueError(f"Got {labels.size} labels for {n} score rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"Label outside [0, {k})")
    p = softmax(raw, axis=1)
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return g, p * (1.0 - p)


def log_loss(raw: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(-log_softmax(raw, axis=1)[np.arange(len(labels)), labels].mean())


@dataclass
class NodeHistogram:
    """Per feature, per bin: summed gradient, summed Hessian and sample count."""
    grad: np.ndarray
    hess: np.ndarray
    count: np.ndarray

    @property
    def total_count(self) -> int:
        return int(self.count[0].sum())


def build_histogram(binned: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
                    n_bins: int = 256) -> NodeHistogram:
    n_features = binned.shape[1]
    idx = (binned[rows].astype(np.intp) + np.arange(n_features) * n_bins).ravel()
    size = n_features * n_bins
    shape = (n_features, n_bins)
    gr = np.repeat(g[rows], n_features)
    hr = np.repeat(h[rows], n_features)
    return NodeHistogram(
        grad=np.bincount(idx, weights=gr, minlength=size).reshape(shape),
        hess=np.bincount(idx, weights=hr, minlength=size).reshape(shape),
        count=np.bincount(idx, minlength=size).reshape(shape),
    )


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: int  # samples with bin <= threshold go left
    gain: float
    left_count: int
    right_count: int


def _score(G, H, reg_lambda):
    return G * G / (H + reg_lambda)


def best_split(hist: NodeHistogram, reg_lambda: float, gamma: float,
               min_samples_leaf: int) -> Optional[SplitCandidate]:
    """
    Best (feature, bin threshold) split of a node.

    gain = (G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)) / 2 - gamma

    Both children need ``min_samples_leaf`` samples. Ties go to the lowest
    feature index, then the lowest threshold. Returns None when no split has
    positive gain.
    """
    G = hist.grad[0].sum()
    H = hist.hess[0].sum()
    n = hist.total_count
    if n < 2 * min_samples_leaf:
        return None

    gl = np.cumsum(hist.grad, axis=1)
    hl = np.cumsum(hist.hess, axis=1)
    nl = np.cumsum(hist.count, axis=1)
    gr, hr, nr = G - gl, H - hl, n - nl

    gain = 0.5 * (_score(gl, hl, reg_lambda) + _score(gr, hr, reg_lambda)
                  - _score(G, H, reg_lambda)) - gamma
    valid = (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
    gain = np.where(valid, gain, -np.inf)

    flat = int(np.argmax(gain))
    feature, threshold = divmod(flat, gain.shape[1])
    best = float(gain[feature, threshold])
    if not best > 0.0:
        return None
    return SplitCandidate(feature=feature, threshold=threshold, gain=best,
                          left_count=int(nl[feature, threshold]),
                          right_count=int(nr[feature, threshold]))


@dataclass
class TreeNode:
    feature: int = -1
    threshold: int = -1
    left: int = -1
    right: int = -1
    value: float = 0.0
    gain: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class Tree:
    nodes: List[TreeNode] = field(default_factory=list)
    # node ids in the order they were split
    split_order: List[int] = field(default_factory=list)

    @property
    def n_leaves(self) -> int:
        return sum(1 for node in self.nodes if node.is_leaf)

    def predict_binned(self, binned: np.ndarray) -> np.ndarray:
        feature = np.array([n.feature for n in self.nodes], dtype=np.intp)
        threshold = np.array([n.threshold for n in self.nodes], dtype=np.intp)
        left = np.array([n.left for n in self.nodes], dtype=np.intp)
        right = np.array([n.right for n in self.nodes], dtype=np.intp)
        value = np.array([n.value for n in self.nodes], dtype=np.float64)

        position = np.zeros(binned.shape[0], dtype=np.intp)
        rows = np.arange(binned.shape[0])
        while rows.size:
            rows = rows[left[position[rows]] >= 0]
            nodes = position[rows]
            goes_left = binned[rows, feature[nodes]] <= threshold[nodes]
            position[rows] = np.where(goes_left, left[nodes], right[nodes])
        return value[position]

    def to_list(self) -> List[List[Any]]:
        return [[n.feature, n.threshold, n.left, n.right, n.value] for n in self.nodes]

    @classmethod
    def from_list(cls, rows: List[List[Any]]) -> "Tree":
        return cls(nodes=[TreeNode(feature=int(f), threshold=int(t), left=int(l), right=int(r),
                                   value=float(v)) for f, t, l, r, v in rows])


def grow_tree(binned: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GbdtConfig) -> Tree:
    """
    Grow one regression tree leaf-wise on (g, h) of a single class.

    Leaf value = -sum(g) / (sum(h) + lambda) * learning_rate.
    """
    n_bins = 256
    tree = Tree()
    rows_of: Dict[int, np.ndarray] = {}
    heap: List[Tuple[float, int, SplitCandidate]] = []

    def add_node(rows: np.ndarray) -> int:
        node_id = len(tree.nodes)
        tree.nodes.append(TreeNode())
        rows_of[node_id] = rows
        if rows.size >= 2 * cfg.min_samples_leaf:
            hist = build_histogram(binned, g, h, rows, n_bins)
            split = best_split(hist, cfg.reg_lambda, cfg.gamma, cfg.min_samples_leaf)
            if split is not None:
                heapq.heappush(heap, (-split.gain, node_id, split))
        return node_id

    add_node(np.arange(binned.shape[0]))
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaves:
        _, node_id, split = heapq.heappop(heap)
        rows = rows_of[node_id]
        goes_left = binned[rows, split.feature] <= split.threshold
        node = tree.nodes[node_id]
        node.feature, node.threshold, node.gain = split.feature, split.threshold, split.gain
        node.left = add_node(rows[goes_left])
        node.right = add_node(rows[~goes_left])
        tree.split_order.append(node_id)
        n_leaves += 1

    for node_id, node in enumerate(tree.nodes):
        if node.is_leaf:
            rows = rows_of[node_id]
            node.value = float(-g[rows].sum() / (h[rows].sum() + cfg.reg_lambda) * cfg.learning_rate)
    return tree


@dataclass
class Forest:
    """K trees per round on top of per-class base scores."""
    n_classes: int
    base_score: np.ndarray
    bin_mapper: BinMapper
    config: GbdtConfig
    rounds: List[List[Tree]] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_round: Optional[int] = None

    @property
    def n_features(self) -> int:
        return self.bin_mapper.n_features

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        binned = self.bin_mapper.transform(X)
        raw = np.tile(self.base_score, (binned.shape[0], 1))
        for trees in self.rounds:
            for k, tree in enumerate(trees):
                raw[:, k] += tree.predict_binned(binned)
        return raw

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FOREST_FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "base_score": self.base_score.tolist(),
            "config": self.config.model_dump(),
            "max_bins": self.bin_mapper.max_bins,
            "bin_thresholds": [t.tolist() for t in self.bin_mapper.thresholds],
            "best_round": self.best_round,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "rounds": [[tree.to_list() for tree in trees] for trees in self.rounds],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Forest":
        version = data.get("format_version")
        if version != FOREST_FORMAT_VERSION:
            raise FormatVersionError(f"Forest format version {version}, expected {FOREST_FORMAT_VERSION}")
        mapper = BinMapper(thresholds=[np.asarray(t, dtype=np.float64) for t in data["bin_thresholds"]],
                           max_bins=int(data["max_bins"]))
        return cls(
            n_classes=int(data["n_classes"]),
            base_score=np.asarray(data["base_score"], dtype=np.float64),
            bin_mapper=mapper,
            config=GbdtConfig.model_validate(data["config"]),
            rounds=[[Tree.from_list(t) for t in trees] for trees in data["rounds"]],
            train_loss=list(data.get("train_loss", [])),
            val_loss=list(data.get("val_loss", [])),
            best_round=data.get("best_round"),
        )


def train(X: np.ndarray, y: Sequence[int], cfg: GbdtConfig, n_classes: Optional[int] = None,
          X_val: Optional[np.ndarray] = None, y_val: Optional[Sequence[int]] = None) -> Forest:
    """
    Fit a boosted forest.

    Args:
        X: M x C training features.
        y: Class index per row.
        cfg: Boosting hyperparameters.
        n_classes: Class count K; defaults to max(y) + 1.
        X_val, y_val: Optional validation set for early stopping on log-loss.

    Returns:
        Forest truncated to its best validation round when early stopping ran.

    Raises:
        TrainingRefused: fewer than two classes present in ``y``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.intp)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"Got {X.shape[0]} rows for {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise TrainingRefused("Training labels hold a single class; refusing to fit a classifier")
    k = n_classes if n_classes is not None else int(y.max()) + 1
    if y.max() >= k:
        raise IndexError(f"Label {int(y.max())} outside [0, {k})")

    mapper = build_bins(X, cfg.max_bins)
    binned = mapper.transform(X)
    priors = np.bincount(y, minlength=k) / y.size
    base = np.log(np.maximum(priors, PRIOR_FLOOR))
    forest = Forest(n_classes=k, base_score=base, bin_mapper=mapper, config=cfg)
    raw = np.tile(base, (X.shape[0], 1))

    use_val = X_val is not None and y_val is not None and len(y_val) > 0 and cfg.early_stop_rounds
    if use_val:
        y_val = np.asarray(y_val, dtype=np.intp)
        binned_val = mapper.transform(X_val)
        raw_val = np.tile(base, (binned_val.shape[0], 1))
        best_loss, best_round = np.inf, 0

    for r in range(cfg.n_rounds):
        g, h = softmax_objective(raw, y)
        trees = [grow_tree(binned, g[:, c], h[:, c], cfg) for c in range(k)]
        for c, tree in enumerate(trees):
            raw[:, c] += tree.predict_binned(binned)
        forest.rounds.append(trees)
        forest.train_loss.append(log_loss(raw, y))

        if use_val:
            for c, tree in enumerate(trees):
                raw_val[:, c] += tree.predict_binned(binned_val)
            loss = log_loss(raw_val, y_val)
            forest.val_loss.append(loss)
            if loss < best_loss:
                best_loss, best_round = loss, r + 1
            elif r + 1 - best_round >= cfg.early_stop_rounds:
                logger.info("Validation log-loss flat for %d rounds; keeping %d of %d rounds",
                            cfg.early_stop_rounds, best_round, r + 1)
                break
        logger.debug("round %d train log-loss %.6f", r + 1, forest.train_loss[-1])

    if use_val:
        forest.rounds = forest.rounds[:best_round]
        forest.best_round = best_round
    logger.info("Trained %d rounds x %d classes on %d rows", len(forest.rounds), k, X.shape[0])
    return forest


def predict_proba(forest: Forest, x: np.ndarray) -> np.ndarray:
    """
    Class probabilities: softmax of base score plus the summed leaf values.

    Accepts a single C-vector (returns K probabilities) or an M x C matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != forest.n_features:
        raise ValueError(f"Forest expects {forest.n_features} features, got {x.shape[-1]}")
    proba = softmax(forest.raw_scores(np.atleast_2d(x)), axis=1)
    return proba[0] if single else proba


def predict(forest: Forest, X: np.ndarray) -> np.ndarray:
    return np.atleast_2d(predict_proba(forest, X)).argmax(axis=1)


def save_forest(forest: Forest, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(forest.to_dict(), indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"Cannot write forest {path}: {exc}") from exc


def load_forest(path: Union[str, Path]) -> Forest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"Cannot read forest {path}: {exc}") from exc
    return Forest.from_dict(data)
