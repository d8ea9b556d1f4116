"""Permutation-Shapley attribution and embedding similarity matrices."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import SchemaError

# model(X) -> y for a batch X of shape (m, d)
BatchModel = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_FEATURES = 10
DEFAULT_PERMUTATIONS = 200
DEFAULT_BACKGROUND = 32
_EVAL_CHUNK = 65536


class ShapError(ValueError):
    def __init__(self, message: str, coalition: tuple[int, ...] | None = None):
        super().__init__(message if coalition is None else f"{message} (coalition {coalition})")
        self.coalition = coalition


@dataclass(frozen=True)
class ShapMode:
    kind: str = "exact"  # "exact" | "monte_carlo"
    n_permutations: int = DEFAULT_PERMUTATIONS
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "monte_carlo"):
            raise ValueError(f"unknown SHAP mode {self.kind!r}")
        if self.kind == "monte_carlo" and self.n_permutations < 2:
            raise ValueError("monte_carlo needs at least two permutations")

    @classmethod
    def exact(cls) -> "ShapMode":
        return cls("exact")

    @classmethod
    def monte_carlo(cls, n_permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0) -> "ShapMode":
        return cls("monte_carlo", n_permutations, seed)


@dataclass(frozen=True, eq=False)
class Attribution:
    """Attributions for a single sample."""

    values: np.ndarray
    base_value: float
    prediction: float
    std_error: np.ndarray | None = None

    @property
    def efficiency_residual(self) -> float:
        return abs(self.base_value + float(self.values.sum()) - self.prediction)


class _CoalitionGame:
    """v(S) = mean over background rows of model(x on S, background elsewhere)."""

    def __init__(self, model: BatchModel, background: np.ndarray, x: np.ndarray):
        self.model = model
        self.background = background
        self.x = x

    def values(self, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(masks).astype(bool)
        nb, d = self.background.shape
        out = np.empty(masks.shape[0])
        per = max(1, _EVAL_CHUNK // nb)
        for start in range(0, masks.shape[0], per):
            block = masks[start : start + per]
            rows = np.where(block[:, None, :], self.x[None, None, :], self.background[None, :, :])
            y = np.asarray(self.model(rows.reshape(-1, d)), dtype=float).reshape(block.shape[0], nb)
            bad = ~np.isfinite(y).all(axis=1)
            if bad.any():
                coalition = tuple(int(i) for i in np.flatnonzero(block[int(np.argmax(bad))]))
                raise ShapError("model returned a non-finite value", coalition)
            out[start : start + block.shape[0]] = y.mean(axis=1)
        return out


def _shapley_weights(d: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def _exact(game: _CoalitionGame, d: int) -> np.ndarray:
    masks = np.array(list(itertools.product([False, True], repeat=d)))[:, ::-1]
    codes = masks @ (1 << np.arange(d))
    v = np.empty(1 << d)
    v[codes] = game.values(masks)
    weights = _shapley_weights(d)
    sizes = masks.sum(axis=1)
    phi = np.zeros(d)
    for j in range(d):
        without = ~masks[:, j]
        c = codes[without]
        phi[j] = np.sum(weights[sizes[without]] * (v[c | (1 << j)] - v[c]))
    return phi


def _monte_carlo(game: _CoalitionGame, d: int, n_permutations: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Antithetic permutation sampling: each sampled order is paired with its reverse."""
    rng = np.random.default_rng(seed)
    n_pairs = max(1, n_permutations // 2)
    pair_means = np.empty((n_pairs, d))
    for p in range(n_pairs):
        order = rng.permutation(d)
        contrib = np.zeros((2, d))
        for t, perm in enumerate((order, order[::-1])):
            masks = np.zeros((d + 1, d), dtype=bool)
            for step, j in enumerate(perm):
                masks[step + 1 :, j] = True
            v = game.values(masks)
            contrib[t, perm] = np.diff(v)
        pair_means[p] = contrib.mean(axis=0)
    phi = pair_means.mean(axis=0)
    se = pair_means.std(axis=0, ddof=1) / math.sqrt(n_pairs) if n_pairs > 1 else np.full(d, np.inf)
    return phi, se


def permutation_shap(model: BatchModel, background, x, mode: ShapMode | None = None) -> Attribution:
    """Interventional Shapley values of ``model`` at ``x`` against ``background``.

    Exact mode enumerates all 2^d coalitions with Shapley weights; Monte Carlo
    averages marginal contributions over antithetic pairs of random orderings
    and reports a per-feature standard error.
    """
    mode = mode or ShapMode.exact()
    background = np.atleast_2d(np.asarray(background, dtype=float))
    x = np.asarray(x, dtype=float).ravel()
    d = x.size
    if d < 1:
        raise ValueError("need at least one feature")
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    if background.shape[1] != d:
        raise ValueError(f"background has {background.shape[1]} features, sample has {d}")
    game = _CoalitionGame(model, background, x)
    ends = game.values(np.array([[False] * d, [True] * d]))
    base, pred = float(ends[0]), float(ends[1])
    if mode.kind == "exact":
        if d > MAX_EXACT_FEATURES:
            raise ValueError(f"exact mode supports at most {MAX_EXACT_FEATURES} features")
        return Attribution(_exact(game, d), base, pred)
    phi, se = _monte_carlo(game, d, mode.n_permutations, mode.seed)
    return Attribution(phi, base, pred, se)


# ---------------------------------------------------------------------------
# Results over many samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShapResult:
    base_value: float
    attributions: np.ndarray  # (n_samples, d)
    feature_names: tuple[str, ...]
    features: np.ndarray  # explained inputs, (n_samples, d)
    predictions: np.ndarray
    mode: str
    n_permutations: int | None
    seed: int | None
    target: str = ""
    index_features: tuple[str, ...] = ()
    rows: tuple[int, ...] = ()
    std_errors: np.ndarray | None = None

    def efficiency_residuals(self) -> np.ndarray:
        return np.abs(self.base_value + self.attributions.sum(axis=1) - self.predictions)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "base_value": self.base_value,
            "feature_names": list(self.feature_names),
            "index_features": list(self.index_features),
            "rows": list(self.rows),
            "features": self.features.tolist(),
            "attributions": self.attributions.tolist(),
            "predictions": self.predictions.tolist(),
            "std_errors": None if self.std_errors is None else self.std_errors.tolist(),
            "mode": self.mode,
            "n_permutations": self.n_permutations,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *self.feature_names, "base_value", "prediction"])
        rows = self.rows or tuple(range(self.attributions.shape[0]))
        for r, phi, pred in zip(rows, self.attributions, self.predictions):
            w.writerow([r, *(f"{v:.12g}" for v in phi), f"{self.base_value:.12g}", f"{pred:.12g}"])
        return buf.getvalue()


def explain_rows(
    model: BatchModel,
    background: np.ndarray,
    samples: np.ndarray,
    feature_names: Sequence[str],
    mode: ShapMode | None = None,
    **meta,
) -> ShapResult:
    mode = mode or ShapMode.exact()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    results = [permutation_shap(model, background, x, mode) for x in samples]
    ses = None if mode.kind == "exact" else np.array([r.std_error for r in results])
    return ShapResult(
        base_value=results[0].base_value if results else float("nan"),
        attributions=np.array([r.values for r in results]).reshape(len(results), samples.shape[1]),
        feature_names=tuple(feature_names),
        features=samples,
        predictions=np.array([r.prediction for r in results]),
        mode=mode.kind,
        n_permutations=None if mode.kind == "exact" else mode.n_permutations,
        seed=None if mode.kind == "exact" else mode.seed,
        std_errors=ses,
        **meta,
    )


def background_sample(train_features: np.ndarray, size: int = DEFAULT_BACKGROUND, seed: int = 0) -> np.ndarray:
    """Seeded uniform subsample of training rows, without replacement."""
    n = train_features.shape[0]
    if size >= n:
        return np.array(train_features, dtype=float)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return np.array(train_features[idx], dtype=float)


def shap_for_target(
    run,
    target: str,
    rows: Sequence[int] | None = None,
    mode: ShapMode | None = None,
    background_size: int = DEFAULT_BACKGROUND,
    background_seed: int = 0,
) -> ShapResult:
    """Explain the final-iteration posterior-mean prediction of ``target``."""
    from .predictor import predict_mean_batch

    if target not in run.target_order:
        raise SchemaError(f"unknown target {target!r}")
    ctx = run.context_for(target)
    features = run.feature_columns(target)
    background = background_sample(run.train.columns(features), background_size, background_seed)
    samples = run.final_features(target)
    rows = list(range(samples.shape[0])) if rows is None else list(rows)

    def model(x: np.ndarray) -> np.ndarray:
        return predict_mean_batch(ctx, x)

    return explain_rows(
        model,
        background,
        samples[rows],
        features,
        mode,
        target=target,
        index_features=tuple(run.train.index_features),
        rows=tuple(int(r) for r in rows),
    )


def mean_abs_shap(result: ShapResult) -> dict[str, dict[str, float]]:
    """Mean |phi| per feature, split into index properties and other targets."""
    if result.attributions.shape[0] == 0:
        raise ValueError("empty SHAP result")
    means = np.abs(result.attributions).mean(axis=0)
    index, other = {}, {}
    for name, v in zip(result.feature_names, means):
        (index if name in result.index_features else other)[name] = float(v)
    return {"index": index, "other": other}


def top_index_feature(result: ShapResult) -> str:
    index = mean_abs_shap(result)["index"]
    if not index:
        raise ValueError("result has no index features")
    return max(index, key=lambda k: (index[k], -result.feature_names.index(k)))


def shap_scatter_data(result: ShapResult, feature: str) -> list[tuple[float, float]]:
    if feature not in result.feature_names:
        raise SchemaError(f"unknown feature {feature!r}")
    j = result.feature_names.index(feature)
    return [(float(x), float(p)) for x, p in zip(result.features[:, j], result.attributions[:, j])]


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray  # (n_rows, n_cols)
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.col_labels or tuple(str(i + 1) for i in range(self.values.shape[1]))
        rows = self.row_labels or tuple(str(i + 1) for i in range(self.values.shape[0]))
        w.writerow(["", *cols])
        for label, row in zip(rows, self.values):
            w.writerow([label, *(f"{v:.12g}" for v in row)])
        return buf.getvalue()


def cosine_matrix(a, b, row_labels: Sequence[str] = (), col_labels: Sequence[str] = ()) -> SimilarityMatrix:
    """Cosine similarity of every row of ``a`` against every row of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("embeddings must share a dimension")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm embedding has no direction")
    s = (a / na[:, None]) @ (b / nb[:, None]).T
    return SimilarityMatrix(np.clip(s, -1.0, 1.0), tuple(row_labels), tuple(col_labels))
