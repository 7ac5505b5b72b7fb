"""Seeded generation of simulation paths.

A path is a warm-up sample followed by T monitored periods.  Each period
evolves the true regression parameters under one of four regimes and then
draws three mutually independent batches: five observations that update the
shadow posterior, five that feed monitoring features, and forty held-out
observations that score predictive regret.

Every random draw comes from its own substream keyed by
(master_seed, cell, path_index, period, role), so path generation is
deterministic, order-independent, and safe to parallelize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .nig import NigParams, update

__all__ = [
    "RegimeKind",
    "Role",
    "SHIFT_PROBS",
    "KAPPA_COSTS",
    "ScenarioCell",
    "TrueState",
    "PeriodData",
    "PathData",
    "cell_key",
    "substream",
    "evolve_regime",
    "generate_path",
    "warm_start",
    "dump_path_csv",
]

SHIFT_PROBS = (0.02, 0.05, 0.10, 0.20)
KAPPA_COSTS = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0)

ABRUPT_SHIFT_SD = 2.0
VARIANCE_SHIFT_LOW = 3.0
VARIANCE_SHIFT_HIGH = 6.0
DRIFT_INCREMENT_SD = 0.15


class RegimeKind(Enum):
    NO_SHIFT = "no_shift"
    ABRUPT_COEF = "abrupt"
    VARIANCE_SHIFT = "variance"
    GRADUAL_DRIFT = "drift"


class Role(IntEnum):
    """Substream labels; each (period, role) pair gets its own RNG stream."""

    INIT = 0
    WARMUP = 1
    EVOLVE = 2
    UPDATE = 3
    MONITOR = 4
    EVAL = 5


@dataclass(frozen=True, slots=True)
class ScenarioCell:
    """One scenario configuration: regime family, shift hazard, cost ratio."""

    regime: RegimeKind
    shift_prob: float
    kappa_cost: float

    def __post_init__(self):
        if self.regime is RegimeKind.NO_SHIFT:
            if self.shift_prob != 0.0:
                raise ValueError("no-shift cells must have shift_prob = 0")
        elif self.shift_prob not in SHIFT_PROBS:
            raise ValueError(f"shift_prob {self.shift_prob} not in {SHIFT_PROBS}")
        if self.kappa_cost not in KAPPA_COSTS:
            raise ValueError(f"kappa_cost {self.kappa_cost} not in {KAPPA_COSTS}")


@dataclass(frozen=True, slots=True)
class TrueState:
    """True data-generating parameters for one period."""

    beta_t: float
    sigma2_t: float
    shift_done: bool = False
    drift_active: bool = False

    def __post_init__(self):
        if self.sigma2_t <= 0:
            raise ValueError(f"sigma2_t must be positive: {self.sigma2_t}")


@dataclass(frozen=True, slots=True)
class PeriodData:
    update_x: np.ndarray
    update_y: np.ndarray
    monitor_x: np.ndarray
    monitor_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    state: TrueState


@dataclass(frozen=True, slots=True)
class PathData:
    warmup: np.ndarray  # (warmup_len, 2) columns x, y
    periods: tuple[PeriodData, ...]
    initial_state: TrueState
    seed_record: tuple[int, ...]

    @property
    def t_periods(self) -> int:
        return len(self.periods)


_REGIME_INDEX = {kind: i for i, kind in enumerate(RegimeKind)}


def cell_key(cell: ScenarioCell) -> tuple[int, int, int]:
    """Stable integer key identifying a cell inside RNG seeds."""
    return (
        _REGIME_INDEX[cell.regime],
        int(round(cell.shift_prob * 1_000_000)),
        int(round(cell.kappa_cost * 1_000_000)),
    )


def substream(
    master_seed: int, cell: ScenarioCell, path_index: int, period: int, role: Role
) -> np.random.Generator:
    """Independent generator for one (cell, path, period, role) slot."""
    key = (master_seed, *cell_key(cell), path_index, period, int(role))
    return np.random.default_rng(np.random.SeedSequence(key))


def evolve_regime(
    state: TrueState,
    regime: RegimeKind,
    shift_prob: float,
    period: int,
    burnin: int,
    rng: np.random.Generator,
) -> TrueState:
    """Advance the true parameters by one period under the given regime.

    Abrupt and variance shifts fire at most once, as a per-period Bernoulli
    hazard after the burn-in.  Gradual drift activates by the same hazard and
    then adds a N(0, DRIFT_INCREMENT_SD^2) step to the coefficient every
    period, starting with the activation period.
    """
    if regime is RegimeKind.NO_SHIFT:
        return state

    if regime is RegimeKind.ABRUPT_COEF:
        if not state.shift_done and period > burnin and rng.uniform() < shift_prob:
            return TrueState(
                beta_t=state.beta_t + rng.normal(0.0, ABRUPT_SHIFT_SD),
                sigma2_t=state.sigma2_t,
                shift_done=True,
            )
        return state

    if regime is RegimeKind.VARIANCE_SHIFT:
        if not state.shift_done and period > burnin and rng.uniform() < shift_prob:
            factor = rng.uniform(VARIANCE_SHIFT_LOW, VARIANCE_SHIFT_HIGH)
            return TrueState(
                beta_t=state.beta_t,
                sigma2_t=state.sigma2_t * factor,
                shift_done=True,
            )
        return state

    # Gradual drift.
    active = state.drift_active
    if not active and period > burnin and rng.uniform() < shift_prob:
        active = True
    if active:
        return TrueState(
            beta_t=state.beta_t + rng.normal(0.0, DRIFT_INCREMENT_SD),
            sigma2_t=state.sigma2_t,
            drift_active=True,
        )
    return state


def _draw_batch(rng: np.random.Generator, n: int, state: TrueState):
    x = rng.normal(0.0, 1.0, size=n)
    y = state.beta_t * x + rng.normal(0.0, np.sqrt(state.sigma2_t), size=n)
    return x, y


def generate_path(
    cell: ScenarioCell,
    master_seed: int,
    path_index: int,
    *,
    t_periods: int = 200,
    warmup_len: int = 300,
    burnin: int = 20,
) -> PathData:
    """Generate one fully deterministic simulation path.

    The initial coefficient is drawn once per path from N(0, 1) and the noise
    variance starts at 1, consistent with the (0, 1, 2, 1) NIG prior.  The
    warm-up sample is drawn under the initial stable state.
    """
    init_rng = substream(master_seed, cell, path_index, 0, Role.INIT)
    initial_state = TrueState(beta_t=float(init_rng.normal(0.0, 1.0)), sigma2_t=1.0)
    state = initial_state

    warm_rng = substream(master_seed, cell, path_index, 0, Role.WARMUP)
    wx, wy = _draw_batch(warm_rng, warmup_len, state)
    warmup = np.column_stack([wx, wy])

    periods = []
    for t in range(1, t_periods + 1):
        evolve_rng = substream(master_seed, cell, path_index, t, Role.EVOLVE)
        state = evolve_regime(state, cell.regime, cell.shift_prob, t, burnin, evolve_rng)
        ux, uy = _draw_batch(substream(master_seed, cell, path_index, t, Role.UPDATE), 5, state)
        mx, my = _draw_batch(substream(master_seed, cell, path_index, t, Role.MONITOR), 5, state)
        ex, ey = _draw_batch(substream(master_seed, cell, path_index, t, Role.EVAL), 40, state)
        periods.append(
            PeriodData(
                update_x=ux, update_y=uy,
                monitor_x=mx, monitor_y=my,
                eval_x=ex, eval_y=ey,
                state=state,
            )
        )

    return PathData(
        warmup=warmup,
        periods=tuple(periods),
        initial_state=initial_state,
        seed_record=(master_seed, *cell_key(cell), path_index),
    )


def warm_start(path: PathData, prior: NigParams) -> NigParams:
    """Posterior after the warm-up sample; initializes both the deployed and
    the shadow posterior, so debt starts at exactly zero."""
    return update(prior, path.warmup)


def dump_path_csv(path: PathData, fileobj) -> None:
    """Write one path as CSV rows (period, role, x, y, beta_true, sigma2_true).

    Warm-up observations carry period 0.
    """
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["period", "role", "x", "y", "beta_true", "sigma2_true"])

    def fmt(v: float) -> str:
        return format(float(v), ".17g")

    init = path.initial_state
    for x, y in path.warmup:
        writer.writerow(["0", "warmup", fmt(x), fmt(y), fmt(init.beta_t), fmt(init.sigma2_t)])
    for t, pd in enumerate(path.periods, start=1):
        for role, xs, ys in (
            ("update", pd.update_x, pd.update_y),
            ("monitor", pd.monitor_x, pd.monitor_y),
            ("eval", pd.eval_x, pd.eval_y),
        ):
            for x, y in zip(xs, ys):
                writer.writerow(
                    [str(t), role, fmt(x), fmt(y), fmt(pd.state.beta_t), fmt(pd.state.sigma2_t)]
                )
