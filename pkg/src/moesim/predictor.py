"""Cross-layer activation prediction.

A deterministic random-forest regressor, written from scratch on numpy, maps
(request embedding, step size, target layer, earlier-layer activations) to
per-expert activation scores. Training uses teacher forcing: the
earlier-layer bits come from the actual activations in the log. At inference
the caller fills them with its own predictions as it walks the horizon.

The module also owns the evaluation side: bit accuracy against logged
activations, exponential decay fits of accuracy-vs-step curves, and curve
comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import ModelSpec, Seed
from .workload import EmbeddingTable, Sample

__all__ = [
    "Sample",
    "ForestHyper",
    "ForestModel",
    "AccuracyReport",
    "DecayFit",
    "CurveComparison",
    "feature_length",
    "group_requests",
    "build_features",
    "inference_features",
    "train",
    "bit_accuracy",
    "selection_bit_accuracy",
    "accuracy_report_csv",
    "fit_decay",
    "decay_value",
    "compare_curves",
    "model_to_json",
    "model_from_json",
]


def feature_length(model: ModelSpec) -> int:
    """F = embed_dim + 2 + num_layers * experts_per_layer."""
    return model.embed_dim + 2 + model.num_layers * model.experts_per_layer


def group_requests(
    samples: Sequence[Sample],
) -> Dict[Tuple[Tuple[int, ...], int], List[Sample]]:
    """Group samples by (token_ids, step_size), each group sorted by layer.

    A duplicate (token_ids, step_size, layer_idx) triple is an error: the log
    would be ambiguous about which record supplies the layer's bits.
    """
    groups: Dict[Tuple[Tuple[int, ...], int], List[Sample]] = {}
    for sample in samples:
        key = (sample.token_ids, sample.step_size)
        groups.setdefault(key, []).append(sample)
    for key, members in groups.items():
        members.sort(key=lambda s: s.layer_idx)
        for a, b in zip(members, members[1:]):
            if a.layer_idx == b.layer_idx:
                raise ValueError(
                    f"duplicate sample for token_ids={key[0]}, "
                    f"step_size={key[1]}, layer_idx={a.layer_idx}"
                )
    return groups


def _pooled(table: EmbeddingTable, token_ids: Tuple[int, ...]) -> np.ndarray:
    return table.vectors[list(token_ids)].mean(axis=0)


def _history_bits(
    model: ModelSpec, history: Mapping[int, Tuple[int, ...]], below_layer: int
) -> np.ndarray:
    """Multi-hot activation history, most recent layer first.

    Slot k (of L) holds the bits of layer ``below_layer - 1 - k``, so the
    immediately preceding layer always occupies the same feature positions
    regardless of the target layer. Expert persistence across consecutive
    layers is then a fixed input-to-output column pairing a tree split can
    find.
    """
    m = model.experts_per_layer
    bits = np.zeros(model.num_layers * m, dtype=np.float64)
    for layer, experts in history.items():
        if 0 <= layer < below_layer:
            k = below_layer - 1 - layer
            if k < model.num_layers:
                for e in experts:
                    bits[k * m + e] = 1.0
    return bits


def _feature_row(
    model: ModelSpec,
    pooled: np.ndarray,
    step: int,
    layer: int,
    history_bits: np.ndarray,
) -> np.ndarray:
    return np.concatenate((pooled, [float(step), float(layer)], history_bits))


def inference_features(
    model: ModelSpec,
    table: EmbeddingTable,
    token_ids: Tuple[int, ...],
    step: int,
    target_layer: int,
    history: Mapping[int, Tuple[int, ...]],
) -> np.ndarray:
    """Feature vector for predicting ``target_layer``.

    ``history`` maps layer -> activated experts for any layers already
    established (actual for executed layers, predicted for horizon layers
    below the target); only layers strictly below the target contribute.
    """
    bits = _history_bits(model, history, target_layer)
    return _feature_row(model, _pooled(table, token_ids), step, target_layer, bits)


def build_features(
    groups: Mapping[Tuple[Tuple[int, ...], int], Sequence[Sample]],
    table: EmbeddingTable,
    model: ModelSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """Assemble the training matrix from grouped samples.

    Rows are emitted in sorted group-key order, layers ascending inside a
    group, so the same log always produces the same matrix. Each row is
    [pooled embedding, step, layer, multi-hot of the group's actual
    activations at strictly earlier layers] with the actual activation bits
    of the row's layer as the regression target.

    Returns
    -------
    X : ndarray of shape (n_samples, F)
    Y : ndarray of shape (n_samples, experts_per_layer)
    """
    rows: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    m = model.experts_per_layer
    for key in sorted(groups):
        token_ids, step = key
        pooled = _pooled(table, token_ids)
        history: Dict[int, Tuple[int, ...]] = {}
        for sample in groups[key]:
            bits = _history_bits(model, history, sample.layer_idx)
            rows.append(
                _feature_row(model, pooled, step, sample.layer_idx, bits)
            )
            y = np.zeros(m, dtype=np.float64)
            for e in sample.actual_experts:
                y[e] = 1.0
            targets.append(y)
            history[sample.layer_idx] = sample.actual_experts
    if not rows:
        raise ValueError("no samples to build features from")
    return np.vstack(rows), np.vstack(targets)


@dataclass(frozen=True)
class ForestHyper:
    """Forest hyperparameters.

    residual=True trains on (activation bits - pre-gate baseline) and adds
    the baseline back at inference instead of predicting the bits directly.
    """

    num_trees: int = 50
    max_depth: int = 12
    min_samples_leaf: int = 2
    residual: bool = False

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(
                f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}"
            )


@dataclass
class _Tree:
    """Flat node-array representation of one regression tree.

    feature[i] is -1 for a leaf (value[i] holds the mean target vector);
    interior nodes send x[feature] <= threshold left.
    """

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[Optional[List[float]]] = field(default_factory=list)

    def add_leaf(self, mean: np.ndarray) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append([float(v) for v in mean])
        return len(self.feature) - 1

    def add_split(self, feat: int, thr: float) -> int:
        self.feature.append(feat)
        self.threshold.append(float(thr))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(None)
        return len(self.feature) - 1

    def predict_one(self, x: np.ndarray) -> np.ndarray:
        node = 0
        while self.feature[node] != -1:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return np.asarray(self.value[node], dtype=np.float64)


def _best_split(
    X: np.ndarray,
    Y: np.ndarray,
    idx: np.ndarray,
    features: np.ndarray,
    min_leaf: int,
) -> Optional[Tuple[int, float]]:
    """Best (feature, threshold) by summed-variance reduction, or None."""
    n = idx.shape[0]
    Ys = Y[idx]
    row_sq = (Ys * Ys).sum(axis=1)
    total_sum = Ys.sum(axis=0)
    total_sq = float(row_sq.sum())
    sse_node = total_sq - float((total_sum * total_sum).sum()) / n

    best_gain = 0.0
    best: Optional[Tuple[int, float]] = None
    for feat in features:
        values = X[idx, feat]
        order = np.argsort(values, kind="stable")
        v_sorted = values[order]
        cum_sum = np.cumsum(Ys[order], axis=0)
        cum_sq = np.cumsum(row_sq[order])
        counts = np.arange(1, n + 1, dtype=np.float64)

        sse_left = cum_sq - (cum_sum * cum_sum).sum(axis=1) / counts
        rest_sum = total_sum - cum_sum
        rest_n = n - counts
        with np.errstate(divide="ignore", invalid="ignore"):
            sse_right = (total_sq - cum_sq) - (rest_sum * rest_sum).sum(axis=1) / rest_n
        gains = sse_node - sse_left - sse_right

        # A cut after sorted position i is valid when the value actually
        # changes there and both sides respect min_samples_leaf.
        for i in range(min_leaf - 1, n - min_leaf):
            if v_sorted[i] == v_sorted[i + 1]:
                continue
            gain = float(gains[i])
            if gain > best_gain + 1e-12:
                best_gain = gain
                best = (int(feat), float((v_sorted[i] + v_sorted[i + 1]) / 2.0))
    return best


def _grow_tree(
    X: np.ndarray,
    Y: np.ndarray,
    idx: np.ndarray,
    hyper: ForestHyper,
    rng: np.random.Generator,
    n_subset: int,
) -> _Tree:
    tree = _Tree()

    def build(node_idx: np.ndarray, depth: int) -> int:
        Ys = Y[node_idx]
        if (
            depth >= hyper.max_depth
            or node_idx.shape[0] < 2 * hyper.min_samples_leaf
            or bool(np.all(Ys == Ys[0]))
        ):
            return tree.add_leaf(Ys.mean(axis=0))
        features = rng.choice(X.shape[1], size=n_subset, replace=False)
        split = _best_split(X, Y, node_idx, features, hyper.min_samples_leaf)
        if split is None:
            return tree.add_leaf(Ys.mean(axis=0))
        feat, thr = split
        mask = X[node_idx, feat] <= thr
        node = tree.add_split(feat, thr)
        tree.left[node] = build(node_idx[mask], depth + 1)
        tree.right[node] = build(node_idx[~mask], depth + 1)
        return node

    build(idx, 0)
    return tree


@dataclass
class ForestModel:
    """A trained forest plus the metadata needed to reuse it.

    embedding_seed records which embedding table the features were built
    with, so a later run can reconstruct identical inputs.
    """

    trees: List[_Tree]
    hyper: ForestHyper
    train_seed: int
    feature_len: int
    num_outputs: int
    embedding_seed: Optional[int] = None

    def predict_scores(
        self, features: np.ndarray, baseline: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Per-expert scores for one feature row (mean over trees).

        Residual models add the scores onto ``baseline`` (required then);
        direct models return the mean leaf vector and ignore ``baseline``.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.feature_len,):
            raise ValueError(
                f"expected feature vector of length {self.feature_len}, "
                f"got shape {features.shape}"
            )
        acc = np.zeros(self.num_outputs, dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict_one(features)
        acc /= len(self.trees)
        if self.hyper.residual:
            if baseline is None:
                raise ValueError("residual model needs a baseline distribution")
            return np.asarray(baseline, dtype=np.float64) + acc
        return acc

    def predict_matrix(
        self, X: np.ndarray, baselines: Optional[np.ndarray] = None
    ) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty((X.shape[0], self.num_outputs), dtype=np.float64)
        for i in range(X.shape[0]):
            row_base = None if baselines is None else baselines[i]
            out[i] = self.predict_scores(X[i], baseline=row_base)
        return out


def train(
    X: np.ndarray, Y: np.ndarray, hyper: ForestHyper, seed: Seed
) -> ForestModel:
    """Fit a random forest regressor with the MSE objective.

    Each tree draws a bootstrap sample of the rows and examines
    floor(sqrt(F)) features per split; leaves store the mean target vector.
    Deterministic: tree i uses the sub-seed split(seed, "tree:i"), so equal
    seeds give identical forests regardless of build order.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("X and Y must be 2-D")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(
            f"X has {X.shape[0]} rows but Y has {Y.shape[0]}"
        )
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    n, f = X.shape
    n_subset = max(1, int(math.sqrt(f)))
    trees: List[_Tree] = []
    for i in range(hyper.num_trees):
        rng = seed.split(f"tree:{i}").rng()
        bootstrap = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X, Y, bootstrap, hyper, rng, n_subset))
    return ForestModel(
        trees=trees,
        hyper=hyper,
        train_seed=seed.value,
        feature_len=f,
        num_outputs=Y.shape[1],
    )


@dataclass(frozen=True)
class AccuracyReport:
    """Bit accuracy over all expert slots, overall and per step size."""

    overall: float
    per_step: Dict[int, float]


def bit_accuracy(
    model: ForestModel,
    X: np.ndarray,
    Y: np.ndarray,
    threshold: float = 0.5,
    *,
    step_column: int,
    baselines: Optional[np.ndarray] = None,
) -> AccuracyReport:
    """Thresholded multi-hot accuracy of the forest on (X, Y).

    A bit is predicted active when its score is >= threshold; accuracy counts
    agreement over every one of the M bits per row. ``step_column`` locates
    the step-size feature for the per-step breakdown; matrices built by
    :func:`build_features` keep it at column ``model_spec.embed_dim``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    scores = model.predict_matrix(X, baselines=baselines)
    hits = (scores >= threshold) == (Y >= 0.5)
    overall = float(hits.mean())
    per_step: Dict[int, float] = {}
    steps = X[:, step_column].round().astype(int)
    for s in sorted(set(steps.tolist())):
        per_step[int(s)] = float(hits[steps == s].mean())
    return AccuracyReport(overall=overall, per_step=per_step)


def selection_bit_accuracy(
    samples: Sequence[Sample], model: ModelSpec
) -> AccuracyReport:
    """Bit accuracy of the logged predicted sets against the actual sets."""
    if not samples:
        raise ValueError("no samples")
    m = model.experts_per_layer
    total_bits = 0
    total_hits = 0
    step_bits: Dict[int, int] = {}
    step_hits: Dict[int, int] = {}
    for sample in samples:
        predicted = set(sample.predicted_experts)
        actual = set(sample.actual_experts)
        wrong = len(predicted ^ actual)
        hits = m - wrong
        total_bits += m
        total_hits += hits
        step_bits[sample.step_size] = step_bits.get(sample.step_size, 0) + m
        step_hits[sample.step_size] = step_hits.get(sample.step_size, 0) + hits
    per_step = {
        s: step_hits[s] / step_bits[s] for s in sorted(step_bits)
    }
    return AccuracyReport(overall=total_hits / total_bits, per_step=per_step)


def accuracy_report_csv(
    predictor: AccuracyReport, pregate: AccuracyReport
) -> str:
    """CSV with columns step_size, predictor_acc, pregate_acc."""
    lines = ["step_size,predictor_acc,pregate_acc"]
    steps = sorted(set(predictor.per_step) | set(pregate.per_step))
    for s in steps:
        p = predictor.per_step.get(s, float("nan"))
        g = pregate.per_step.get(s, float("nan"))
        lines.append(f"{s},{p!r},{g!r}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DecayFit:
    """Least-squares fit of f(t) = a * exp(-b * t) + c, b >= 0."""

    a: float
    b: float
    c: float
    rss: float = 0.0


def decay_value(fit: DecayFit, t: float) -> float:
    return fit.a * math.exp(-fit.b * t) + fit.c


def _profiled_fit(
    t: np.ndarray, y: np.ndarray, b: float
) -> Tuple[float, float, float]:
    """For fixed b, solve the linear (a, c) subproblem exactly."""
    basis = np.exp(-b * t)
    design = np.column_stack((basis, np.ones_like(t)))
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_decay(
    series: Union[Mapping[int, float], Iterable[Tuple[int, float]]]
) -> DecayFit:
    """Fit a * exp(-b * t) + c to an accuracy-vs-step series.

    The nonlinear rate b is found by a coarse log-spaced grid followed by
    golden-section refinement, with (a, c) solved exactly by least squares at
    every candidate; the returned fit is the best over all candidates, so no
    single-start alternative can beat it on residual norm. Requires at least
    three points with strictly increasing steps.
    """
    if isinstance(series, Mapping):
        pairs = sorted(series.items())
    else:
        pairs = list(series)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 points, got {len(pairs)}")
    steps = [p[0] for p in pairs]
    for s0, s1 in zip(steps, steps[1:]):
        if s1 <= s0:
            raise ValueError(f"steps must be strictly increasing, got {steps}")
    t = np.asarray(steps, dtype=np.float64)
    y = np.asarray([p[1] for p in pairs], dtype=np.float64)

    grid = np.logspace(-3, 1.7, 60)
    rss_grid = [(_profiled_fit(t, y, b)[2], i) for i, b in enumerate(grid)]
    best_i = min(rss_grid)[1]
    lo = grid[best_i - 1] if best_i > 0 else grid[0] / 2.0
    hi = grid[best_i + 1] if best_i + 1 < len(grid) else grid[-1] * 2.0

    # Golden-section on the profiled residual over [lo, hi].
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - phi * (hi - lo)
    x2 = lo + phi * (hi - lo)
    f1 = _profiled_fit(t, y, x1)[2]
    f2 = _profiled_fit(t, y, x2)[2]
    for _ in range(200):
        if hi - lo < 1e-12:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - phi * (hi - lo)
            f1 = _profiled_fit(t, y, x1)[2]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + phi * (hi - lo)
            f2 = _profiled_fit(t, y, x2)[2]

    candidates = [grid[best_i], (lo + hi) / 2.0]
    best: Optional[DecayFit] = None
    for b in candidates:
        a, c, rss = _profiled_fit(t, y, b)
        if best is None or rss < best.rss:
            best = DecayFit(a=a, b=float(b), c=c, rss=rss)
    assert best is not None
    return best


@dataclass(frozen=True)
class CurveComparison:
    """Two decay fits side by side; delta_inf is the asymptotic gap."""

    fit_p: DecayFit
    fit_g: DecayFit

    def delta(self, t: float) -> float:
        return decay_value(self.fit_p, t) - decay_value(self.fit_g, t)

    @property
    def delta_inf(self) -> float:
        return self.fit_p.c - self.fit_g.c


def compare_curves(fit_p: DecayFit, fit_g: DecayFit) -> CurveComparison:
    return CurveComparison(fit_p=fit_p, fit_g=fit_g)


_FOREST_FORMAT = "moesim-forest"
_FOREST_VERSION = 1


def model_to_json(model: ForestModel) -> str:
    """Serialize a forest to versioned JSON; byte-stable for equal models."""
    payload = {
        "format": _FOREST_FORMAT,
        "version": _FOREST_VERSION,
        "hyper": {
            "num_trees": model.hyper.num_trees,
            "max_depth": model.hyper.max_depth,
            "min_samples_leaf": model.hyper.min_samples_leaf,
            "residual": model.hyper.residual,
        },
        "train_seed": model.train_seed,
        "feature_len": model.feature_len,
        "num_outputs": model.num_outputs,
        "embedding_seed": model.embedding_seed,
        "trees": [
            {
                "feature": tree.feature,
                "threshold": tree.threshold,
                "left": tree.left,
                "right": tree.right,
                "value": tree.value,
            }
            for tree in model.trees
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str) -> ForestModel:
    payload = json.loads(text)
    if payload.get("format") != _FOREST_FORMAT:
        raise ValueError(f"not a forest file: format={payload.get('format')!r}")
    if payload.get("version") != _FOREST_VERSION:
        raise ValueError(f"unsupported forest version {payload.get('version')!r}")
    hyper = ForestHyper(**payload["hyper"])
    trees = [
        _Tree(
            feature=list(t["feature"]),
            threshold=[float(v) for v in t["threshold"]],
            left=list(t["left"]),
            right=list(t["right"]),
            value=[None if v is None else [float(x) for x in v] for v in t["value"]],
        )
        for t in payload["trees"]
    ]
    return ForestModel(
        trees=trees,
        hyper=hyper,
        train_seed=payload["train_seed"],
        feature_len=payload["feature_len"],
        num_outputs=payload["num_outputs"],
        embedding_seed=payload.get("embedding_seed"),
    )
