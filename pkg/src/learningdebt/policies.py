"""Retraining policies and their lagged execution on simulation paths.

All policies share the same period loop: a retrain decided at period t is
applied at the start of period t+1 by adopting the shadow posterior as the
new deployed posterior (age and detector state reset), the shadow is then
updated with the period's update batch, monitoring signals are computed, both
posteriors are scored on the held-out evaluation batch, and finally the
policy's trigger is evaluated on the current signals.

The shadow side of a path is policy-independent, so a PathEngine precomputes
the shadow posterior sequence and shadow scores once and memoizes the
deployed-side quantities keyed by (deployment period, current period); runs
of many policies or parameter-grid members on one path then share almost all
of the numerical work.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.special import digamma

from .monitor import AgeAdjustment, MonitoringRecord, RESIDUAL_EXCEED_THRESHOLD
from .nig import BETA_FLOOR, NigParams
from .scenario import PathData

__all__ = [
    "PolicyKind",
    "DEBT_FEATURES",
    "HYBRID_FEATURES",
    "PolicySpec",
    "UtilityModel",
    "PolicyTrajectory",
    "UnderdeterminedFitError",
    "PathEngine",
    "run_policy",
    "run_policy_summary",
    "fit_utility_model",
    "predict_regret",
    "cusum_step",
    "binary_threshold",
    "one_period_regret",
    "dump_trajectory_csv",
]


class PolicyKind(str, Enum):
    DEBT_THRESHOLD = "debt_threshold"
    DEBT_UTILITY = "debt_utility"
    HYBRID_UTILITY = "hybrid_utility"
    CALENDAR = "calendar"
    CUSUM = "cusum"
    ALARM_RAW_DEBT = "alarm_raw_debt"
    ALWAYS = "always"
    NEVER = "never"


DEBT_FEATURES = ("pos_adj_debt", "age")
HYBRID_FEATURES = DEBT_FEATURES + ("score_gap", "mean_gap", "resid_exceed", "raw_debt")


@dataclass(frozen=True)
class UtilityModel:
    """Linear model for log(1 + regret): intercept followed by one
    coefficient per named feature."""

    coef: np.ndarray
    feature_list: tuple[str, ...]

    def __post_init__(self):
        if len(self.coef) != len(self.feature_list) + 1:
            raise ValueError(
                f"coefficient count {len(self.coef)} != feature count "
                f"{len(self.feature_list)} + 1"
            )


@dataclass(frozen=True)
class PolicySpec:
    """A policy kind with its parameter record.

    Parameters by kind: debt_threshold {c}; alarm_raw_debt {c}; calendar {k};
    cusum {k_ref, h}; debt_utility / hybrid_utility {model: UtilityModel};
    always / never {}.
    """

    kind: PolicyKind
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        if self.kind is PolicyKind.CALENDAR:
            if p["k"] < 1:
                raise ValueError(f"calendar period must be >= 1: {p['k']}")
        elif self.kind is PolicyKind.CUSUM:
            if p["k_ref"] < 0 or p["h"] <= 0:
                raise ValueError(f"cusum needs k_ref >= 0 and h > 0: {p}")
        elif self.kind in (PolicyKind.DEBT_UTILITY, PolicyKind.HYBRID_UTILITY):
            if not isinstance(p.get("model"), UtilityModel):
                raise ValueError(f"{self.kind.value} requires a fitted model")


@dataclass
class PolicyTrajectory:
    """Record of one policy run on one path."""

    retrain_periods: list[int]
    retrain_count: int
    deployed_scores: np.ndarray  # mean evaluation log score per period
    shadow_scores: np.ndarray
    records: list[MonitoringRecord]
    signals: np.ndarray  # the policy's trigger signal per period


class UnderdeterminedFitError(ValueError):
    """Raised when a utility fit has fewer rows than coefficients."""


class PathEngine:
    """Shared per-path precomputation for policy runs.

    Index convention: shadow state s = 0 is the warm-start posterior; state
    s = t is the shadow after period t's update batch.  A policy deployed at
    the start of period t holds shadow state t - 1.
    """

    def __init__(self, path: PathData, prior: NigParams):
        self.path = path
        T = path.t_periods
        self.t_periods = T

        warm_x = path.warmup[:, 0]
        warm_y = path.warmup[:, 1]
        k0 = prior.kappa + float(warm_x @ warm_x)
        m0 = (prior.kappa * prior.mu + float(warm_x @ warm_y)) / k0
        a0 = prior.alpha + 0.5 * len(warm_x)
        b0 = prior.beta + 0.5 * (
            float(warm_y @ warm_y) + prior.kappa * prior.mu**2 - k0 * m0**2
        )

        ux = np.stack([p.update_x for p in path.periods])  # (T, 5)
        uy = np.stack([p.update_y for p in path.periods])
        sxx = np.einsum("ij,ij->i", ux, ux)
        sxy = np.einsum("ij,ij->i", ux, uy)
        syy = np.einsum("ij,ij->i", uy, uy)

        kappa = np.empty(T + 1)
        mu = np.empty(T + 1)
        alpha = np.empty(T + 1)
        beta = np.empty(T + 1)
        kappa[0], mu[0], alpha[0], beta[0] = k0, m0, a0, b0
        kappa[1:] = k0 + np.cumsum(sxx)
        mu[1:] = (k0 * m0 + np.cumsum(sxy)) / kappa[1:]
        alpha[1:] = a0 + 2.5 * np.arange(1, T + 1)
        beta[1:] = b0 + 0.5 * (np.cumsum(syy) + k0 * m0**2 - kappa[1:] * mu[1:] ** 2)
        np.maximum(beta, BETA_FLOOR, out=beta)
        self.mu, self.kappa, self.alpha, self.beta = mu, kappa, alpha, beta

        self.mon_x = np.stack([p.monitor_x for p in path.periods])
        self.mon_y = np.stack([p.monitor_y for p in path.periods])
        self.eval_x = np.stack([p.eval_x for p in path.periods])
        self.eval_y = np.stack([p.eval_y for p in path.periods])

        # Shadow-side scores, index t-1 for period t.
        self.shadow_mon = self._mean_scores(np.arange(1, T + 1), self.mon_x, self.mon_y)
        self.shadow_eval = self._mean_scores(np.arange(1, T + 1), self.eval_x, self.eval_y)

        # Log-gamma terms of the NIG density, precomputed per state for the
        # closed-form KL evaluated in dep_stats.
        self._lgamma_alpha = np.array([math.lgamma(a) for a in alpha])
        self._digamma_alpha = np.asarray(digamma(alpha), dtype=float)
        self._log_beta = np.log(beta)
        self._log_kappa = np.log(kappa)
        self._dep_cache: dict[tuple[int, int], tuple[float, float, float, float]] = {}

    def posterior(self, s: int) -> NigParams:
        """Shadow posterior state s as a NigParams value."""
        return NigParams(
            float(self.mu[s]), float(self.kappa[s]), float(self.alpha[s]), float(self.beta[s])
        )

    def _mean_scores(self, states: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Mean log predictive score of shadow state states[i] on row i."""
        mu = self.mu[states, None]
        kappa = self.kappa[states, None]
        alpha = self.alpha[states, None]
        beta = self.beta[states, None]
        df = 2.0 * alpha
        scale2 = (beta / alpha) * (1.0 + xs * xs / kappa)
        z2 = (ys - mu * xs) ** 2 / scale2
        lg = np.vectorize(math.lgamma)
        const = lg(0.5 * (df + 1.0)) - lg(0.5 * df) - 0.5 * np.log(df * math.pi)
        scores = const - 0.5 * np.log(scale2) - 0.5 * (df + 1.0) * np.log1p(z2 / df)
        return scores.mean(axis=1)

    def dep_stats(self, s: int, t: int) -> tuple[float, float, float, float]:
        """Deployed-side quantities for shadow state s at period t.

        Returns (kl, dep_monitor_score, resid_exceed, dep_eval_score) where
        kl = KL(shadow_t || shadow_s) and the scores are per-observation
        means on period t's monitoring and evaluation batches.
        """
        key = (s, t)
        hit = self._dep_cache.get(key)
        if hit is not None:
            return hit

        mu1, k1, a1, b1 = self.mu[t], self.kappa[t], self.alpha[t], self.beta[t]
        mu2, k2, a2, b2 = self.mu[s], self.kappa[s], self.alpha[s], self.beta[s]
        normal = 0.5 * (
            k2 * (mu1 - mu2) ** 2 * a1 / b1
            + k2 / k1
            - 1.0
            - (self._log_kappa[s] - self._log_kappa[t])
        )
        invgamma = (
            (a1 - a2) * self._digamma_alpha[t]
            - self._lgamma_alpha[t]
            + self._lgamma_alpha[s]
            + a2 * (self._log_beta[t] - self._log_beta[s])
            + a1 * (b2 - b1) / b1
        )
        kl = float(normal + invgamma)

        i = t - 1
        df = 2.0 * a2
        const = (
            math.lgamma(0.5 * (df + 1.0))
            - math.lgamma(0.5 * df)
            - 0.5 * math.log(df * math.pi)
        )
        ratio = b2 / a2

        mx, my = self.mon_x[i], self.mon_y[i]
        scale2 = ratio * (1.0 + mx * mx / k2)
        z2 = (my - mu2 * mx) ** 2 / scale2
        mon_score = float(
            np.mean(const - 0.5 * np.log(scale2) - 0.5 * (df + 1.0) * np.log1p(z2 / df))
        )
        resid_exceed = float(np.mean(z2 > RESIDUAL_EXCEED_THRESHOLD**2))

        ex, ey = self.eval_x[i], self.eval_y[i]
        scale2e = ratio * (1.0 + ex * ex / k2)
        z2e = (ey - mu2 * ex) ** 2 / scale2e
        eval_score = float(
            np.mean(const - 0.5 * np.log(scale2e) - 0.5 * (df + 1.0) * np.log1p(z2e / df))
        )

        out = (kl, mon_score, resid_exceed, eval_score)
        self._dep_cache[key] = out
        return out


def cusum_step(g_prev: float, score_gap: float, k_ref: float) -> float:
    """One CUSUM recursion on the positive score gap with drift allowance
    k_ref; the statistic never goes below zero."""
    return max(0.0, g_prev + max(0.0, score_gap) - k_ref)


def binary_threshold(c_churn: float, c_wait: float) -> float:
    """Bayes-action probability threshold c_churn / (c_churn + c_wait) for the
    two-state staleness decision."""
    if c_churn <= 0 or c_wait <= 0:
        raise ValueError("both excess losses must be positive")
    return c_churn / (c_churn + c_wait)


def one_period_regret(shadow_score: float, deployed_score: float) -> float:
    """Positive part of the shadow-minus-deployed predictive score."""
    if not (math.isfinite(shadow_score) and math.isfinite(deployed_score)):
        raise ValueError("scores must be finite")
    return max(0.0, shadow_score - deployed_score)


def fit_utility_model(rows, feature_list: Sequence[str]) -> UtilityModel:
    """Least-squares fit of log(1 + regret) on an intercept plus features.

    rows is either an iterable of (feature_vector, regret) pairs or a tuple
    (X, r) of arrays.  Solved by normal equations with a 1e-8 ridge jitter on
    the diagonal for rank safety.
    """
    if isinstance(rows, tuple) and len(rows) == 2 and hasattr(rows[0], "shape"):
        X = np.asarray(rows[0], dtype=float)
        r = np.asarray(rows[1], dtype=float)
    else:
        pairs = list(rows)
        X = np.asarray([p[0] for p in pairs], dtype=float)
        r = np.asarray([p[1] for p in pairs], dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if k != len(feature_list):
        raise ValueError(f"feature width {k} != named features {len(feature_list)}")
    if n < k + 1:
        raise UnderdeterminedFitError(f"{n} rows cannot determine {k + 1} coefficients")
    if (r < 0).any():
        raise ValueError("regret targets must be nonnegative")
    design = np.column_stack([np.ones(n), X])
    target = np.log1p(r)
    gram = design.T @ design + 1e-8 * np.eye(k + 1)
    coef = np.linalg.solve(gram, design.T @ target)
    return UtilityModel(coef=coef, feature_list=tuple(feature_list))


def _feature_values(record: MonitoringRecord, age: int) -> dict[str, float]:
    return {
        "pos_adj_debt": max(0.0, record.adj_debt),
        "age": float(age),
        "score_gap": record.score_gap,
        "mean_gap": record.mean_gap,
        "resid_exceed": record.resid_exceed,
        "raw_debt": record.raw_debt,
    }


def _predict_from_values(model: UtilityModel, values: Mapping[str, float]) -> float:
    lp = model.coef[0]
    for c, name in zip(model.coef[1:], model.feature_list):
        lp += c * values[name]
    return max(0.0, math.expm1(lp))


def predict_regret(model: UtilityModel, record: MonitoringRecord, age: int) -> float:
    """Calibrated expected one-period regret max(0, exp(linear) - 1)."""
    return _predict_from_values(model, _feature_values(record, age))


def _simulate(
    engine: PathEngine,
    spec: PolicySpec,
    adj: AgeAdjustment,
    lam: float,
    collect: bool,
):
    """Shared period loop for every policy kind.

    Returns (retrain_periods, regret_sum) and, when collect is true, the full
    per-period records, scores and signals.
    """
    T = engine.t_periods
    kind = spec.kind
    params = spec.params
    mu = engine.mu
    mu0_by_age = adj.mu0_by_age
    a_cap = adj.a_max
    sigma0 = adj.sigma0

    c = params.get("c")
    k_cal = params.get("k")
    k_ref = params.get("k_ref")
    h = params.get("h")
    model: UtilityModel | None = params.get("model")

    retrains: list[int] = []
    pending = False
    age = 0
    dep = 0
    g = 0.0
    regret_sum = 0.0

    records: list[MonitoringRecord] = []
    dep_scores = np.empty(T) if collect else None
    signals = np.empty(T) if collect else None

    for t in range(1, T + 1):
        if pending:
            pending = False
            dep = t - 1
            age = 0
            g = 0.0
            retrains.append(t)
        else:
            age += 1

        kl, dep_mon, resid_exceed, dep_eval = engine.dep_stats(dep, t)
        raw_d = math.sqrt(kl) if kl > 0.0 else 0.0
        adj_d = (raw_d - mu0_by_age[age if age < a_cap else a_cap]) / sigma0
        gap = engine.shadow_mon[t - 1] - dep_mon
        shadow_eval = engine.shadow_eval[t - 1]
        excess = shadow_eval - dep_eval
        if excess > 0.0:
            regret_sum += excess

        if kind is PolicyKind.DEBT_THRESHOLD:
            signal = adj_d
            trigger = adj_d > c
        elif kind is PolicyKind.CALENDAR:
            signal = float(age)
            trigger = age >= k_cal
        elif kind is PolicyKind.CUSUM:
            g = cusum_step(g, gap, k_ref)
            signal = g
            trigger = g > h
        elif kind is PolicyKind.ALARM_RAW_DEBT:
            signal = raw_d
            trigger = raw_d > c
        elif kind is PolicyKind.ALWAYS:
            signal = 1.0
            trigger = True
        elif kind is PolicyKind.NEVER:
            signal = 0.0
            trigger = False
        else:  # utility policies
            mean_gap = abs(mu[t] - mu[dep])
            values = {
                "pos_adj_debt": adj_d if adj_d > 0.0 else 0.0,
                "age": float(age),
                "score_gap": gap,
                "mean_gap": mean_gap,
                "resid_exceed": resid_exceed,
                "raw_debt": raw_d,
            }
            signal = _predict_from_values(model, values)
            trigger = signal > lam

        if trigger:
            pending = True

        if collect:
            records.append(
                MonitoringRecord(
                    period=t,
                    age=age,
                    raw_debt=raw_d,
                    adj_debt=adj_d,
                    score_gap=gap,
                    mean_gap=abs(mu[t] - mu[dep]),
                    resid_exceed=resid_exceed,
                )
            )
            dep_scores[t - 1] = dep_eval
            signals[t - 1] = signal

    if collect:
        return retrains, regret_sum, records, dep_scores, signals
    return retrains, regret_sum


def run_policy(
    path: PathData,
    spec: PolicySpec,
    adj: AgeAdjustment,
    prior: NigParams,
    lam: float,
    *,
    engine: PathEngine | None = None,
) -> PolicyTrajectory:
    """Run one policy over a path with the one-period action lag.

    The retraining cost lam enters only the utility policies' triggers; the
    returned trajectory carries everything the objective needs.
    """
    if lam <= 0:
        raise ValueError(f"retraining cost must be positive: {lam}")
    if engine is None:
        engine = PathEngine(path, prior)
    retrains, _, records, dep_scores, signals = _simulate(engine, spec, adj, lam, True)
    return PolicyTrajectory(
        retrain_periods=retrains,
        retrain_count=len(retrains),
        deployed_scores=dep_scores,
        shadow_scores=engine.shadow_eval.copy(),
        records=records,
        signals=signals,
    )


def run_policy_summary(
    engine: PathEngine, spec: PolicySpec, adj: AgeAdjustment, lam: float
) -> tuple[int, float]:
    """Fast path used by tuning and evaluation: only (retrain count, summed
    positive evaluation regret)."""
    retrains, regret_sum = _simulate(engine, spec, adj, lam, False)
    return len(retrains), regret_sum


def dump_trajectory_csv(traj: PolicyTrajectory, fileobj) -> None:
    """Write the per-period trajectory record as CSV."""
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(
        [
            "period",
            "age",
            "raw_debt",
            "adj_debt",
            "score_gap",
            "deployed_eval_score",
            "shadow_eval_score",
            "retrain_applied",
        ]
    )
    applied = set(traj.retrain_periods)

    def fmt(v: float) -> str:
        return format(float(v), ".17g")

    for rec in traj.records:
        i = rec.period - 1
        writer.writerow(
            [
                str(rec.period),
                str(rec.age),
                fmt(rec.raw_debt),
                fmt(rec.adj_debt),
                fmt(rec.score_gap),
                fmt(traj.deployed_scores[i]),
                fmt(traj.shadow_scores[i]),
                "1" if rec.period in applied else "0",
            ]
        )
