"""Fit-free in-context predictor.

The training table is stored (standardized) as context and every prediction is
a kernel-weighted readout over it: class probabilities, discretized posteriors
for real-valued targets, affinity embeddings and probability grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .data import (
    CLASS_LABEL,
    DataError,
    DataTable,
    SchemaError,
    StandardizationStats,
    standardization_from_matrix,
)

DEFAULT_BINS = 128
MIN_BINS = 8
DEFAULT_ALPHA = 0.5
MAX_DEFAULT_K = 16


class PredictorError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorHyper:
    """Optional overrides; ``None`` means use the data-driven default."""

    bandwidth: float | None = None
    k: int | None = None
    bins: int = DEFAULT_BINS
    alpha: float = DEFAULT_ALPHA
    log_features: bool = False

    def to_dict(self) -> dict:
        return {
            "bandwidth": self.bandwidth,
            "k": self.k,
            "bins": self.bins,
            "alpha": self.alpha,
            "log_features": self.log_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorHyper":
        return cls(**{k: d[k] for k in ("bandwidth", "k", "bins", "alpha", "log_features") if k in d})


@dataclass(frozen=True, eq=False)
class PredictorContext:
    features: np.ndarray
    targets: np.ndarray
    stats: StandardizationStats
    bandwidth: float
    k_neighbors: int
    feature_names: tuple[str, ...]
    target_name: str
    classes: tuple[str, ...] = ()
    alpha: float = DEFAULT_ALPHA
    bins: int = DEFAULT_BINS
    log_features: bool = False

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_classifier(self) -> bool:
        return bool(self.classes)

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise PredictorError(f"expected {self.d} features, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise PredictorError("query features must be finite")
        if self.log_features:
            if np.any(x <= 0):
                raise PredictorError("log-scaled features require positive inputs")
            x = np.log(x)
        return self.stats.transform(x)


@dataclass(frozen=True, eq=False)
class DiscretePosterior:
    bin_edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if edges.ndim != 1 or probs.ndim != 1 or edges.size != probs.size + 1:
            raise PredictorError("posterior needs B+1 edges for B probabilities")
        if not np.all(np.diff(edges) > 0):
            raise PredictorError("bin edges must be strictly increasing")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise PredictorError("posterior probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "probs", probs)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def density(self) -> np.ndarray:
        return self.probs / self.widths

    def cdf(self, v: float) -> float:
        edges, probs = self.bin_edges, self.probs
        if v <= edges[0]:
            return 0.0
        if v >= edges[-1]:
            return 1.0
        b = int(np.searchsorted(edges, v, side="right")) - 1
        c = probs[:b].sum() + probs[b] * (v - edges[b]) / (edges[b + 1] - edges[b])
        return float(min(max(c, 0.0), 1.0))

    def to_dict(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscretePosterior":
        return cls(np.asarray(d["bin_edges"], dtype=float), np.asarray(d["probs"], dtype=float))


def posterior_mean(p: DiscretePosterior) -> float:
    return float(np.dot(p.probs, p.midpoints))


def posterior_quantile(p: DiscretePosterior, q: float) -> float:
    """Smallest v with CDF(v) >= q, the CDF linear inside each bin."""
    if not 0.0 <= q <= 1.0 or math.isnan(q):
        raise PredictorError(f"quantile level must lie in [0, 1], got {q}")
    probs, edges = p.probs, p.bin_edges
    support = np.flatnonzero(probs > 0)
    if q <= 0.0:
        return float(edges[support[0]])
    cum = np.cumsum(probs)
    b = int(np.searchsorted(cum, q, side="left"))
    if b >= probs.size:
        # q above the float total; the sum may fall short of 1 by rounding
        return float(edges[support[-1] + 1])
    below = cum[b - 1] if b > 0 else 0.0
    frac = (q - below) / probs[b]
    return float(edges[b] + min(max(frac, 0.0), 1.0) * (edges[b + 1] - edges[b]))


def posterior_median(p: DiscretePosterior) -> float:
    return posterior_quantile(p, 0.5)


# ---------------------------------------------------------------------------
# Context construction
# ---------------------------------------------------------------------------


def median_heuristic(z: np.ndarray) -> float:
    """Kernel bandwidth from the median pairwise distance.

    Uses the exp(-d^2 / median^2) convention, i.e. h = median / sqrt(2) in the
    exp(-d^2 / 2h^2) kernel.
    """
    n = z.shape[0]
    if n < 2:
        raise PredictorError("median heuristic needs at least two context rows")
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    iu = np.triu_indices(n, 1)
    med = float(np.median(np.sqrt(d2[iu])))
    if med <= 0.0:
        med = 1.0
    return med / math.sqrt(2.0)


def build_context(
    train: DataTable,
    target_column: str,
    hyper: PredictorHyper | None = None,
    feature_columns: Sequence[str] | None = None,
) -> PredictorContext:
    """Store a standardized training set as prediction context.

    Features default to the table's index_feature columns.
    """
    hyper = hyper or PredictorHyper()
    if train.n_rows == 0:
        raise PredictorError("training table is empty")
    if target_column not in train.names:
        raise SchemaError(f"unknown target column {target_column!r}")
    features = list(train.index_features if feature_columns is None else feature_columns)
    if not features:
        raise SchemaError("no feature columns")
    if target_column in features:
        raise SchemaError("target column cannot also be a feature")
    if not train.is_fully_observed(features + [target_column]):
        raise DataError("training context must be fully observed in feature and target columns")
    if hyper.bins < MIN_BINS:
        raise PredictorError(f"bins must be >= {MIN_BINS}")
    if hyper.alpha < 0:
        raise PredictorError("alpha must be nonnegative")

    x = train.columns(features)
    if hyper.log_features:
        if np.any(x <= 0):
            raise PredictorError("log-scaled features require positive training values")
        x = np.log(x)
    stats = standardization_from_matrix(x, features)
    z = stats.transform(x)

    classes: tuple[str, ...] = ()
    y = train.column(target_column)
    if train.schema[train.column_index(target_column)].role == CLASS_LABEL:
        classes = train.classes
        y = y.astype(int)

    if train.n_rows < 2 and hyper.bandwidth is None:
        raise PredictorError("median heuristic needs at least two context rows")
    h = median_heuristic(z) if hyper.bandwidth is None else float(hyper.bandwidth)
    if not h > 0:
        raise PredictorError("bandwidth must be positive")
    k = min(train.n_rows, MAX_DEFAULT_K) if hyper.k is None else int(hyper.k)
    if not 1 <= k <= train.n_rows:
        raise PredictorError(f"k_neighbors must lie in [1, {train.n_rows}], got {k}")

    z.setflags(write=False)
    y = np.array(y)
    y.setflags(write=False)
    return PredictorContext(
        features=z,
        targets=y,
        stats=stats,
        bandwidth=h,
        k_neighbors=k,
        feature_names=tuple(features),
        target_name=target_column,
        classes=classes,
        alpha=float(hyper.alpha),
        bins=int(hyper.bins),
        log_features=bool(hyper.log_features),
    )


_CHUNK = 2048


def _sq_distances(ctx: PredictorContext, zq: np.ndarray) -> np.ndarray:
    z = ctx.features
    d2 = np.sum(zq * zq, axis=1)[:, None] + np.sum(z * z, axis=1)[None, :] - 2.0 * (zq @ z.T)
    return np.maximum(d2, 0.0)


def _neighbor_mask(d2: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k nearest context rows per query, keeping ties at the k-th distance."""
    if k >= d2.shape[1]:
        return np.ones(d2.shape, dtype=bool)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
    return d2 <= kth


def _chunks(n: int):
    for start in range(0, n, _CHUNK):
        yield slice(start, min(start + _CHUNK, n))


def _as_queries(ctx: PredictorContext, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return ctx.standardize(np.atleast_2d(x))


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def predict_class_proba_batch(ctx: PredictorContext, x) -> np.ndarray:
    """Class probabilities for each query row, ``(n_queries, n_classes)``."""
    if not ctx.is_classifier:
        raise PredictorError("context target is not a class label")
    zq = _as_queries(ctx, x)
    n_classes = len(ctx.classes)
    onehot = (ctx.targets[:, None] == np.arange(n_classes)[None, :]).astype(float)
    sums = np.empty((zq.shape[0], n_classes))
    for sl in _chunks(zq.shape[0]):
        d2 = _sq_distances(ctx, zq[sl])
        near = _neighbor_mask(d2, ctx.k_neighbors)
        w = np.where(near, np.exp(-d2 / (2.0 * ctx.bandwidth**2)), 0.0)
        sums[sl] = w @ onehot
    probs = (sums + ctx.alpha) / (sums.sum(axis=1, keepdims=True) + n_classes * ctx.alpha)
    return probs / probs.sum(axis=1, keepdims=True)


def predict_class_proba(ctx: PredictorContext, x) -> np.ndarray:
    return predict_class_proba_batch(ctx, np.asarray(x, dtype=float)[None, :])[0]


def predict_labels(ctx: PredictorContext, x) -> list[str]:
    # argmax keeps the lowest class index on exact ties
    probs = predict_class_proba_batch(ctx, x)
    return [ctx.classes[i] for i in np.argmax(probs, axis=1)]


# ---------------------------------------------------------------------------
# Regression posteriors
# ---------------------------------------------------------------------------


def posterior_grid(ctx: PredictorContext, bins: int | None = None) -> np.ndarray:
    """Equal-width bin edges extending half the context target range on each side."""
    bins = ctx.bins if bins is None else bins
    y = ctx.targets
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo
    if span <= 0:
        half = 0.5 * max(abs(lo), 1.0)
        return np.linspace(lo - half, lo + half, bins + 1)
    return np.linspace(lo - 0.5 * span, hi + 0.5 * span, bins + 1)


def _neighbors(ctx: PredictorContext, zq: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest context rows per query as padded arrays ``(index, valid, normalized weight)``."""
    d2 = _sq_distances(ctx, zq)
    near = _neighbor_mask(d2, ctx.k_neighbors)
    m = int(near.sum(axis=1).max())
    if m < d2.shape[1]:
        order = np.argpartition(d2, m - 1, axis=1)[:, :m]
    else:
        order = np.broadcast_to(np.arange(m), d2.shape).copy()
    valid = np.take_along_axis(near, order, axis=1)
    d2n = np.take_along_axis(d2, order, axis=1)
    w = np.where(valid, np.exp(-d2n / (2.0 * ctx.bandwidth**2)), 0.0)
    total = w.sum(axis=1, keepdims=True)
    dead = total[:, 0] == 0.0
    if np.any(dead):
        # every kernel weight underflowed: uniform over the k nearest
        w[dead] = valid[dead].astype(float)
        total = w.sum(axis=1, keepdims=True)
    return order, valid, w / total


def _silverman_rows(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Silverman's rule per row over the valid entries of a padded matrix."""
    count = valid.sum(axis=1)
    safe = np.maximum(count, 1)
    mean = np.where(valid, values, 0.0).sum(axis=1) / safe
    ss = np.where(valid, (values - mean[:, None]) ** 2, 0.0).sum(axis=1)
    sd = np.sqrt(ss / np.maximum(count - 1, 1))
    ordered = np.sort(np.where(valid, values, np.inf), axis=1)

    def pct(level: float) -> np.ndarray:
        pos = level * (safe - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, safe - 1)
        a = np.take_along_axis(ordered, lo[:, None], axis=1)[:, 0]
        b = np.take_along_axis(ordered, hi[:, None], axis=1)[:, 0]
        return a + (pos - lo) * (b - a)

    iqr = (pct(0.75) - pct(0.25)) / 1.34
    spread = np.where(iqr > 0, np.minimum(sd, iqr), sd)
    out = 0.9 * spread * np.power(count, -0.2)
    return np.where(count >= 2, out, 0.0)


def predict_posterior_batch(ctx: PredictorContext, x, bins: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Discretized posteriors for each query: ``(edges (B+1,), probs (n_queries, B))``.

    Each posterior is the kernel-weighted mixture of Gaussians centred on the
    neighbours' targets, integrated exactly over every bin and renormalized
    to the grid.
    """
    if ctx.is_classifier:
        raise PredictorError("context target is a class label; use predict_class_proba")
    bins = ctx.bins if bins is None else int(bins)
    if bins < MIN_BINS:
        raise PredictorError(f"bins must be >= {MIN_BINS}")
    zq = _as_queries(ctx, x)
    edges = posterior_grid(ctx, bins)
    width = edges[1] - edges[0]
    y = ctx.targets
    probs = np.zeros((zq.shape[0], bins))
    if float(y.max() - y.min()) <= 0.0:
        probs[:, min(int(np.searchsorted(edges, y[0], side="right")) - 1, bins - 1)] = 1.0
        return edges, probs
    for sl in _chunks(zq.shape[0]):
        order, valid, w = _neighbors(ctx, zq[sl])
        centers = y[order]
        sigma = np.maximum(_silverman_rows(centers, valid), width)
        cdf = ndtr((edges[None, None, :] - centers[:, :, None]) / sigma[:, None, None])
        mass = np.einsum("qm,qmb->qb", w, np.diff(cdf, axis=2))
        probs[sl] = mass / mass.sum(axis=1, keepdims=True)
    return edges, probs


def predict_posterior(ctx: PredictorContext, x, bins: int | None = None) -> DiscretePosterior:
    edges, probs = predict_posterior_batch(ctx, np.asarray(x, dtype=float)[None, :], bins)
    return DiscretePosterior(edges, probs[0])


def predict_mean_batch(ctx: PredictorContext, x, bins: int | None = None) -> np.ndarray:
    edges, probs = predict_posterior_batch(ctx, x, bins)
    mids = 0.5 * (edges[:-1] + edges[1:])
    return probs @ mids


# ---------------------------------------------------------------------------
# Embeddings and grids
# ---------------------------------------------------------------------------


def embed_batch(ctx: PredictorContext, x) -> np.ndarray:
    """Unit-norm kernel affinity profiles against every context row."""
    zq = _as_queries(ctx, x)
    logw = np.vstack([-_sq_distances(ctx, zq[sl]) / (2.0 * ctx.bandwidth**2) for sl in _chunks(zq.shape[0])])
    # shift before exp: the normalized direction is unchanged and never underflows to zero
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def embed(ctx: PredictorContext, x) -> np.ndarray:
    return embed_batch(ctx, np.asarray(x, dtype=float)[None, :])[0]


@dataclass(frozen=True, eq=False)
class DecisionGrid:
    x_axis: np.ndarray
    y_axis: np.ndarray
    probs: np.ndarray  # (len(y_axis), len(x_axis)), row-major over y
    positive_class: str


def decision_grid(
    ctx: PredictorContext,
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    resolution: int | tuple[int, int],
    positive_class: str | None = None,
) -> DecisionGrid:
    """Probability of ``positive_class`` at cell centers over a 2-feature domain."""
    if ctx.d != 2:
        raise PredictorError("decision grids need a two-feature context")
    nx, ny = (resolution, resolution) if isinstance(resolution, int) else resolution
    if nx < 2 or ny < 2:
        raise PredictorError("resolution must be >= 2 per axis")
    (x0, x1), (y0, y1) = x_range, y_range
    if not (x1 > x0 and y1 > y0):
        raise PredictorError("grid ranges must be nonempty")
    positive_class = positive_class or ctx.classes[-1]
    c = ctx.classes.index(positive_class)
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    probs = predict_class_proba_batch(ctx, pts)[:, c].reshape(ny, nx)
    return DecisionGrid(xs, ys, probs, positive_class)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def accuracy(y_true: Sequence, y_pred: Sequence) -> float:
    y_true, y_pred = list(y_true), list(y_pred)
    return sum(a == b for a, b in zip(y_true, y_pred)) / len(y_true)


def roc_auc(is_positive: Sequence[bool], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(is_positive, dtype=bool)
    s = np.asarray(scores, dtype=float)
    if pos.all() or not pos.any():
        raise ValueError("ROC-AUC needs both classes present")
    diff = s[pos][:, None] - s[~pos][None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def with_hyper(hyper: PredictorHyper, **changes) -> PredictorHyper:
    return replace(hyper, **changes)
