"""Iterated conditional-mean imputation of mechanical targets.

Each sweep visits the targets in order; for target ``j`` the predictor is
conditioned on the training table with the index properties plus the other
targets as features, and every missing test cell of ``j`` is overwritten with
its posterior mean. Updates are visible immediately to later targets in the
same sweep (Gauss-Seidel order). Observed cells are never touched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DataError, DataTable, SchemaError
from .predictor import (
    DEFAULT_BINS,
    DiscretePosterior,
    PredictorContext,
    PredictorHyper,
    build_context,
    predict_posterior_batch,
)

log = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 10


@dataclass(frozen=True)
class ImputationConfig:
    iterations: int = DEFAULT_ITERATIONS
    target_order: tuple[str, ...] | None = None
    bins: int = DEFAULT_BINS
    hyper: PredictorHyper = field(default_factory=PredictorHyper)
    early_stop_tol: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.target_order is not None:
            object.__setattr__(self, "target_order", tuple(self.target_order))

    def resolved_order(self, table: DataTable) -> tuple[str, ...]:
        targets = table.targets
        if self.target_order is None:
            return tuple(targets)
        if sorted(self.target_order) != sorted(targets):
            raise SchemaError(f"target_order {self.target_order} is not a permutation of {targets}")
        return self.target_order

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "target_order": None if self.target_order is None else list(self.target_order),
            "bins": self.bins,
            "hyper": self.hyper.to_dict(),
            "early_stop_tol": self.early_stop_tol,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImputationConfig":
        return cls(
            iterations=int(d.get("iterations", DEFAULT_ITERATIONS)),
            target_order=d.get("target_order"),
            bins=int(d.get("bins", DEFAULT_BINS)),
            hyper=PredictorHyper.from_dict(d.get("hyper", {})),
            early_stop_tol=d.get("early_stop_tol"),
        )


@dataclass(eq=False)
class ImputationRun:
    """Result of an imputation run.

    ``estimates[k]`` is the test matrix after sweep ``k`` (``k = 0`` is the
    initialization). ``rmse_by_iteration[target]`` has one entry per snapshot,
    or is ``None`` when that target has no missing cells or no truth was given.
    """

    train: DataTable
    test: DataTable
    config: ImputationConfig
    target_order: tuple[str, ...]
    estimates: list[np.ndarray]
    final_posteriors: dict[tuple[int, str], DiscretePosterior]
    observed_mask: np.ndarray
    rmse_by_iteration: dict[str, list[float] | None] | None = None

    @property
    def final(self) -> np.ndarray:
        return self.estimates[-1]

    @property
    def iterations_run(self) -> int:
        return len(self.estimates) - 1

    def feature_columns(self, target: str) -> list[str]:
        return self.train.index_features + [t for t in self.target_order if t != target]

    def context_for(self, target: str) -> PredictorContext:
        """Rebuild the final-iteration predictor for ``target``."""
        if target not in self.target_order:
            raise SchemaError(f"unknown target {target!r}")
        return _context(self.train, target, self.feature_columns(target), self.config)

    def final_features(self, target: str) -> np.ndarray:
        idx = [self.test.column_index(c) for c in self.feature_columns(target)]
        return self.final[:, idx]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "target_order": list(self.target_order),
            "train": self.train.to_dict(),
            "test": self.test.to_dict(),
            "snapshots": [e.tolist() for e in self.estimates],
            "rmse_table": rmse_table(self),
            "rmse_by_iteration": self.rmse_by_iteration,
            "posteriors": [
                {"row": row, "target": target, **p.to_dict()}
                for (row, target), p in sorted(self.final_posteriors.items(), key=lambda kv: (kv[0][0], self.target_order.index(kv[0][1])))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImputationRun":
        test = DataTable.from_dict(d["test"])
        posteriors = {(int(p["row"]), p["target"]): DiscretePosterior.from_dict(p) for p in d["posteriors"]}
        return cls(
            train=DataTable.from_dict(d["train"]),
            test=test,
            config=ImputationConfig.from_dict(d["config"]),
            target_order=tuple(d["target_order"]),
            estimates=[np.asarray(e, dtype=float) for e in d["snapshots"]],
            final_posteriors=posteriors,
            observed_mask=~test.missing,
            rmse_by_iteration=d.get("rmse_by_iteration"),
        )


def _context(train: DataTable, target: str, features: list[str], config: ImputationConfig) -> PredictorContext:
    hyper = config.hyper
    if hyper.bins != config.bins:
        hyper = PredictorHyper(hyper.bandwidth, hyper.k, config.bins, hyper.alpha, hyper.log_features)
    return build_context(train, target, hyper, feature_columns=features)


def _check_inputs(train: DataTable, test: DataTable) -> None:
    if train.schema != test.schema:
        raise SchemaError("train and test tables must share a schema")
    if not train.is_fully_observed():
        raise DataError("training table must be fully observed")
    if not train.targets:
        raise SchemaError("no mechanical_target columns to impute")
    if not train.index_features:
        raise SchemaError("at least one index_feature column is required")
    if not test.is_fully_observed(test.index_features):
        raise DataError("test index features must be fully observed")


def initialize(train: DataTable, test: DataTable, config: ImputationConfig | None = None) -> np.ndarray:
    """Test matrix with missing target cells set to the training-column mean."""
    _check_inputs(train, test)
    est = np.array(test.values, dtype=float)
    for name in test.targets:
        j = test.column_index(name)
        rows = test.missing[:, j]
        est[rows, j] = train.column(name).mean()
    return est


def run_icm(
    train: DataTable,
    test: DataTable,
    config: ImputationConfig | None = None,
    truth: DataTable | None = None,
) -> ImputationRun:
    config = config or ImputationConfig()
    order = config.resolved_order(train)
    est = initialize(train, test, config)
    estimates = [est.copy()]
    posteriors: dict[tuple[int, str], DiscretePosterior] = {}
    contexts = {}
    for target in order:
        features = test.index_features + [t for t in order if t != target]
        contexts[target] = (_context(train, target, features, config), [test.column_index(c) for c in features])

    if not test.missing.any():
        log.warning("test table has no missing cells; estimates stay constant")

    for k in range(1, config.iterations + 1):
        previous = est.copy()
        last = k == config.iterations
        for target in order:
            j = test.column_index(target)
            rows = np.flatnonzero(test.missing[:, j])
            if rows.size == 0:
                continue
            ctx, cols = contexts[target]
            edges, probs = predict_posterior_batch(ctx, est[np.ix_(rows, cols)])
            mids = 0.5 * (edges[:-1] + edges[1:])
            est[rows, j] = probs @ mids
            if last or config.early_stop_tol is not None:
                for r, p in zip(rows, probs):
                    posteriors[(int(r), target)] = DiscretePosterior(edges, p)
        estimates.append(est.copy())
        delta = float(np.max(np.abs(est - previous))) if est.size else 0.0
        log.debug("sweep %d max change %.3g", k, delta)
        if config.early_stop_tol is not None and delta < config.early_stop_tol:
            log.info("early stop after sweep %d (max change %.3g)", k, delta)
            break

    run = ImputationRun(
        train=train,
        test=test,
        config=config,
        target_order=order,
        estimates=estimates,
        final_posteriors=posteriors,
        observed_mask=~test.missing,
    )
    if truth is not None:
        run.rmse_by_iteration = rmse_trajectory(run, truth)
    return run


def rmse(estimates: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-column RMSE over ``mask`` cells; NaN for columns with no masked cell."""
    estimates, truth = np.asarray(estimates, float), np.asarray(truth, float)
    mask = np.asarray(mask, dtype=bool)
    out = np.full(estimates.shape[1], np.nan)
    for j in range(estimates.shape[1]):
        m = mask[:, j]
        if m.any():
            if not np.all(np.isfinite(truth[m, j])):
                raise DataError("truth does not cover every masked cell")
            out[j] = math.sqrt(float(np.mean((estimates[m, j] - truth[m, j]) ** 2)))
    return out


def rmse_trajectory(run: ImputationRun, truth: DataTable) -> dict[str, list[float] | None]:
    if truth.schema != run.test.schema:
        raise SchemaError("truth table schema differs from test schema")
    traj: dict[str, list[float] | None] = {}
    for target in run.target_order:
        j = run.test.column_index(target)
        mask = run.test.missing[:, [j]]
        if not mask.any():
            traj[target] = None
            continue
        traj[target] = [float(rmse(e[:, [j]], truth.values[:, [j]], mask)[0]) for e in run.estimates]
    return traj


def normalized_trend(run: ImputationRun) -> dict[str, list[float] | None]:
    """RMSE at each sweep divided by RMSE at sweep 1."""
    if run.rmse_by_iteration is None:
        raise ValueError("run has no RMSE trajectory (no truth supplied)")
    out: dict[str, list[float] | None] = {}
    for target, traj in run.rmse_by_iteration.items():
        if traj is None or len(traj) < 2 or traj[1] == 0.0:
            out[target] = None
            continue
        out[target] = [v / traj[1] for v in traj[1:]]
    return out


def rmse_table(run: ImputationRun) -> list[dict] | None:
    """Rows of ``{target, rmse_iter1, rmse_iterK, ratio}``; absent values are ``None``."""
    if run.rmse_by_iteration is None:
        return None
    rows = []
    for target in run.target_order:
        traj = run.rmse_by_iteration.get(target)
        if traj is None or len(traj) < 2:
            rows.append({"target": target, "rmse_iter1": None, "rmse_iterK": None, "ratio": None})
            continue
        first, last = traj[1], traj[-1]
        rows.append({"target": target, "rmse_iter1": first, "rmse_iterK": last, "ratio": last / first if first > 0 else None})
    return rows
