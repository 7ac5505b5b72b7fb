"""Objective computation, score-unit scaling, policy tuning, paired bootstrap
intervals, and cross-cell aggregation.

The objective of a policy run is the retraining cost lambda times the number
of retrains plus the summed positive per-period evaluation regret.  The cost
ratio kappa of a scenario cell is converted into lambda by a score unit: a
quantile or mean of the positive one-period regrets observed in calibration.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .monitor import AgeAdjustment
from .nig import NigParams
from .policies import PathEngine, PolicyKind, PolicySpec, PolicyTrajectory, run_policy_summary
from .scenario import PathData, ScenarioCell

__all__ = [
    "ScoreUnitKind",
    "ScoreUnit",
    "CellSummary",
    "EmptyCalibrationError",
    "UndefinedRatioError",
    "IncompleteExperimentError",
    "quantile_linear",
    "objective",
    "score_unit",
    "grid_policy_stats",
    "select_from_grid",
    "tune_policy",
    "paired_bootstrap_ci",
    "summarize_comparison",
]


class ScoreUnitKind(str, Enum):
    Q75 = "q75"
    MEDIAN = "median"
    MEAN = "mean"


@dataclass(frozen=True)
class ScoreUnit:
    """A positive score scale converting cost ratios into retraining costs."""

    kind: ScoreUnitKind
    value: float

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"score unit must be positive and finite: {self.value}")


class EmptyCalibrationError(ValueError):
    """Raised when no positive regrets are available to set the score unit."""


class UndefinedRatioError(ArithmeticError):
    """Raised when a benchmark cell mean objective is exactly zero."""


class IncompleteExperimentError(RuntimeError):
    """Raised when expected scenario cells are missing from the results."""


def quantile_linear(values, q: float) -> float:
    """Quantile with linear interpolation between order statistics: with
    sorted values v[0..n-1], h = (n - 1) q and the result is
    v[floor(h)] + (h - floor(h)) * (v[floor(h) + 1] - v[floor(h)])."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    h = (v.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def objective(traj: PolicyTrajectory, lam: float) -> float:
    """lam * retrain count + summed positive per-period evaluation regret."""
    if lam <= 0:
        raise ValueError(f"retraining cost must be positive: {lam}")
    excess = traj.shadow_scores - traj.deployed_scores
    return lam * traj.retrain_count + float(np.clip(excess, 0.0, None).sum())


def score_unit(calibration_regrets, kind: ScoreUnitKind | str) -> ScoreUnit:
    """Compute the score unit from the positive one-period calibration
    regrets; non-positive entries are ignored."""
    kind = ScoreUnitKind(kind)
    arr = np.asarray(calibration_regrets, dtype=float)
    arr = arr[arr > 0]
    if arr.size == 0:
        raise EmptyCalibrationError("no positive calibration regrets")
    if kind is ScoreUnitKind.MEAN:
        value = float(arr.mean())
    elif kind is ScoreUnitKind.MEDIAN:
        value = quantile_linear(arr, 0.5)
    else:
        value = quantile_linear(arr, 0.75)
    return ScoreUnit(kind=kind, value=value)


def grid_policy_stats(
    kind: PolicyKind,
    grid: Sequence[Mapping],
    engines: Sequence[PathEngine],
    adj: AgeAdjustment,
) -> list[tuple[float, float]]:
    """Mean retrain count and mean summed regret per grid member over the
    tuning paths.  Valid only for kinds whose decisions ignore lambda, which
    makes the mean objective linear in lambda."""
    if kind in (PolicyKind.DEBT_UTILITY, PolicyKind.HYBRID_UTILITY):
        raise ValueError("utility policies are calibrated, not grid-tuned")
    stats = []
    for params in grid:
        spec = PolicySpec(kind=kind, params=dict(params))
        n_total = 0.0
        r_total = 0.0
        for engine in engines:
            n, r = run_policy_summary(engine, spec, adj, lam=1.0)
            n_total += n
            r_total += r
        stats.append((n_total / len(engines), r_total / len(engines)))
    return stats


def select_from_grid(
    kind: PolicyKind,
    grid: Sequence[Mapping],
    stats: Sequence[tuple[float, float]],
    lam: float,
) -> PolicySpec:
    """Grid member minimizing mean objective; ties go to fewer mean retrains,
    then to earlier grid order."""
    best = min(
        range(len(grid)),
        key=lambda i: (lam * stats[i][0] + stats[i][1], stats[i][0], i),
    )
    return PolicySpec(kind=kind, params=dict(grid[best]))


def tune_policy(
    kind: PolicyKind,
    grid: Sequence[Mapping],
    paths: Sequence[PathData | PathEngine],
    adj: AgeAdjustment,
    prior: NigParams,
    lam: float,
) -> PolicySpec:
    """Pick the grid member with the lowest mean objective on the tuning
    paths."""
    if not grid:
        raise ValueError("empty tuning grid")
    engines = [
        p if isinstance(p, PathEngine) else PathEngine(p, prior) for p in paths
    ]
    stats = grid_policy_stats(kind, grid, engines, adj)
    return select_from_grid(kind, grid, stats, lam)


def paired_bootstrap_ci(
    debt_objs: Sequence[np.ndarray],
    bench_objs: Sequence[np.ndarray],
    b: int,
    seed: int,
    *,
    method: str = "sample",
    aggregation: str = "mean_of_ratios",
) -> tuple[float, float]:
    """95 percent interval for the mean relative objective by resampling path
    indices with replacement within each cell.

    debt_objs and bench_objs hold one aligned per-path objective array per
    cell; the default statistic is the mean over cells of the cell-mean
    ratio.  method="enumerate" replaces sampling with the full set of ordered
    within-cell resamples (only feasible for tiny fixtures)."""
    if len(debt_objs) != len(bench_objs) or not debt_objs:
        raise ValueError("need one aligned pair of objective arrays per cell")
    if aggregation not in ("mean_of_ratios", "ratio_of_means"):
        raise ValueError(f"unknown aggregation: {aggregation}")
    cells = []
    for d, bm in zip(debt_objs, bench_objs):
        d = np.asarray(d, dtype=float)
        bm = np.asarray(bm, dtype=float)
        if d.shape != bm.shape or d.ndim != 1 or d.size == 0:
            raise ValueError("objective arrays must be aligned non-empty 1-D pairs")
        cells.append((d, bm))

    def combine(d_means: np.ndarray, b_means: np.ndarray) -> np.ndarray:
        # shapes (draws, cells); returns the statistic per draw
        if aggregation == "ratio_of_means":
            return d_means.mean(axis=1) / b_means.mean(axis=1)
        return (d_means / b_means).mean(axis=1)

    if method == "enumerate":
        per_cell = []
        total = 1
        for d, bm in cells:
            n = d.size
            combos = [
                (float(d[list(ix)].mean()), float(bm[list(ix)].mean()))
                for ix in itertools.product(range(n), repeat=n)
            ]
            per_cell.append(combos)
            total *= len(combos)
            if total > 2_000_000:
                raise ValueError("enumeration too large; use method='sample'")
        draws = list(itertools.product(*per_cell))
        d_means = np.array([[pair[0] for pair in draw] for draw in draws])
        b_means = np.array([[pair[1] for pair in draw] for draw in draws])
        stats = combine(d_means, b_means)
    elif method == "sample":
        if b < 1000:
            raise ValueError("need at least 1000 bootstrap draws")
        rng = np.random.default_rng(seed)
        d_means = np.empty((b, len(cells)))
        b_means = np.empty((b, len(cells)))
        for j, (d, bm) in enumerate(cells):
            idx = rng.integers(0, d.size, size=(b, d.size))
            d_means[:, j] = d[idx].mean(axis=1)
            b_means[:, j] = bm[idx].mean(axis=1)
        stats = combine(d_means, b_means)
    else:
        raise ValueError(f"unknown method: {method}")

    return quantile_linear(stats, 0.025), quantile_linear(stats, 0.975)


@dataclass(frozen=True)
class CellSummary:
    """Paired per-cell comparison of a policy against a benchmark."""

    cell: ScenarioCell
    policy: str
    benchmark: str
    policy_objs: np.ndarray
    bench_objs: np.ndarray
    policy_retrains_mean: float
    bench_retrains_mean: float

    @property
    def rel(self) -> float:
        bench_mean = float(self.bench_objs.mean())
        if bench_mean == 0.0:
            raise UndefinedRatioError(
                f"benchmark {self.benchmark} has zero mean objective in {self.cell}"
            )
        return float(self.policy_objs.mean()) / bench_mean

    @property
    def win(self) -> bool:
        return float(self.policy_objs.mean()) < float(self.bench_objs.mean())


def summarize_comparison(
    summaries: Sequence[CellSummary],
    expected_cells: Sequence[ScenarioCell],
    *,
    b: int,
    seed: int,
    aggregation: str = "mean_of_ratios",
) -> dict:
    """Aggregate per-cell paired comparisons into one report row.

    Returns wins, cells, the mean relative objective with its bootstrap
    interval, and median / interquartile range of the cell-level relatives.
    """
    have = {s.cell for s in summaries}
    missing = [c for c in expected_cells if c not in have]
    if missing:
        raise IncompleteExperimentError(f"missing cells: {missing}")

    rels = np.array([s.rel for s in summaries])
    if aggregation == "mean_of_ratios":
        mean_rel = float(rels.mean())
    elif aggregation == "ratio_of_means":
        mean_rel = float(
            np.mean([s.policy_objs.mean() for s in summaries])
            / np.mean([s.bench_objs.mean() for s in summaries])
        )
    else:
        raise ValueError(f"unknown aggregation: {aggregation}")
    low, high = paired_bootstrap_ci(
        [s.policy_objs for s in summaries],
        [s.bench_objs for s in summaries],
        b,
        seed,
        aggregation=aggregation,
    )
    return {
        "policy": summaries[0].policy,
        "benchmark": summaries[0].benchmark,
        "wins": int(sum(s.win for s in summaries)),
        "cells": len(summaries),
        "mean_rel": mean_rel,
        "ci_low": low,
        "ci_high": high,
        "median_rel": quantile_linear(rels, 0.5),
        "iqr_low": quantile_linear(rels, 0.25),
        "iqr_high": quantile_linear(rels, 0.75),
    }
