"""Per-period monitoring signals and the stable-sample age adjustment.

The core monitor is the learning-debt signal: the square root of the KL
divergence from the continuously updated shadow posterior to the frozen
deployed posterior.  Because the shadow keeps learning even when nothing
shifts, raw debt grows with deployment-spell age; the age adjustment centers
and scales it by the debt curve estimated from stable no-shift calibration
paths, so that ordinary learning does not look like staleness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .nig import NigParams, kl_nig, predictive_log_scores

__all__ = [
    "SIGMA_FLOOR",
    "RESIDUAL_EXCEED_THRESHOLD",
    "CalibrationGapError",
    "AgeAdjustment",
    "MonitoringRecord",
    "raw_debt",
    "fit_age_adjustment",
    "adjust",
    "monitoring_features",
    "save_age_adjustment",
    "load_age_adjustment",
]

SIGMA_FLOOR = 1e-6
RESIDUAL_EXCEED_THRESHOLD = 2.0


class CalibrationGapError(ValueError):
    """Raised when the calibration sample leaves ages uncovered."""


@dataclass(frozen=True)
class AgeAdjustment:
    """Stable-sample mean debt by spell age plus a pooled residual scale.

    mu0_by_age[a] is the expected raw debt at age a under no shift; sigma0 is
    the standard deviation of the pooled residuals, floored at SIGMA_FLOOR.
    """

    mu0_by_age: np.ndarray
    sigma0: float
    a_max: int

    def __post_init__(self):
        if self.sigma0 < SIGMA_FLOOR:
            raise ValueError(f"sigma0 {self.sigma0} below floor {SIGMA_FLOOR}")
        if len(self.mu0_by_age) != self.a_max + 1:
            raise ValueError("mu0_by_age length must be a_max + 1")
        if not np.isfinite(self.mu0_by_age).all():
            raise ValueError("non-finite mu0 values")


@dataclass(frozen=True, slots=True)
class MonitoringRecord:
    """Signals computed from one period's monitoring batch."""

    period: int
    age: int
    raw_debt: float
    adj_debt: float
    score_gap: float
    mean_gap: float
    resid_exceed: float


def raw_debt(shadow: NigParams, deployed: NigParams) -> float:
    """Square root of KL(shadow || deployed); the shadow is the reference."""
    return math.sqrt(max(0.0, kl_nig(shadow, deployed)))


def fit_age_adjustment(
    records: Iterable[tuple[int, float]],
    *,
    sigma_floor: float = SIGMA_FLOOR,
    smoothing: str = "none",
) -> AgeAdjustment:
    """Fit the per-age debt mean curve and pooled residual scale.

    Every age 0..a_max (a_max = the largest age present) must be covered by
    at least one record.  sigma0 is the population standard deviation of the
    residuals d - mu0(age), floored at sigma_floor.  smoothing="ma5" replaces
    the per-age means with a centered moving average of window 5.
    """
    recs = list(records)
    if not recs:
        raise CalibrationGapError("no calibration records")
    ages = np.asarray([r[0] for r in recs], dtype=int)
    debts = np.asarray([r[1] for r in recs], dtype=float)
    a_max = int(ages.max())
    counts = np.bincount(ages, minlength=a_max + 1)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise CalibrationGapError(f"ages with no calibration records: {missing.tolist()}")
    sums = np.bincount(ages, weights=debts, minlength=a_max + 1)
    mu0 = sums / counts
    if smoothing == "ma5":
        kernel = np.ones(5)
        mu0 = np.convolve(mu0, kernel, mode="same") / np.convolve(
            np.ones_like(mu0), kernel, mode="same"
        )
    elif smoothing != "none":
        raise ValueError(f"unknown smoothing mode: {smoothing}")
    resid = debts - mu0[ages]
    sigma0 = max(float(np.std(resid)), sigma_floor)
    return AgeAdjustment(mu0_by_age=mu0, sigma0=sigma0, a_max=a_max)


def adjust(raw: float, age: int, adj: AgeAdjustment) -> float:
    """Standardized debt (raw - mu0(age)) / sigma0; ages beyond the calibrated
    range use mu0(a_max)."""
    idx = age if age < adj.a_max else adj.a_max
    return (raw - adj.mu0_by_age[idx]) / adj.sigma0


def monitoring_features(
    shadow: NigParams,
    deployed: NigParams,
    batch,
    age: int,
    adj: AgeAdjustment,
    *,
    period: int = 0,
) -> MonitoringRecord:
    """Compute all monitoring signals from one batch.

    score_gap is the mean shadow-minus-deployed log predictive score;
    mean_gap the absolute posterior-mean difference; resid_exceed the
    fraction of batch residuals beyond RESIDUAL_EXCEED_THRESHOLD scale units
    under the deployed predictive.
    """
    arr = np.asarray(batch, dtype=float).reshape(-1, 2)
    x = arr[:, 0]
    y = arr[:, 1]
    shadow_scores = predictive_log_scores(shadow, x, y)
    deployed_scores = predictive_log_scores(deployed, x, y)
    score_gap = float(np.mean(shadow_scores - deployed_scores))
    mean_gap = abs(shadow.mu - deployed.mu)
    scale = np.sqrt((deployed.beta / deployed.alpha) * (1.0 + x * x / deployed.kappa))
    standardized = np.abs(y - deployed.mu * x) / scale
    resid_exceed = float(np.mean(standardized > RESIDUAL_EXCEED_THRESHOLD))
    d = raw_debt(shadow, deployed)
    return MonitoringRecord(
        period=period,
        age=age,
        raw_debt=d,
        adj_debt=adjust(d, age, adj),
        score_gap=score_gap,
        mean_gap=mean_gap,
        resid_exceed=resid_exceed,
    )


def save_age_adjustment(adj: AgeAdjustment, fileobj) -> None:
    """Persist as CSV rows (age, mu0) with one trailing sigma0 row."""
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["age", "mu0"])
    for age, mu in enumerate(adj.mu0_by_age):
        writer.writerow([str(age), format(float(mu), ".17g")])
    writer.writerow(["sigma0", format(adj.sigma0, ".17g")])


def load_age_adjustment(fileobj) -> AgeAdjustment:
    """Inverse of save_age_adjustment; round-trips exactly."""
    reader = csv.reader(fileobj)
    header = next(reader)
    if header != ["age", "mu0"]:
        raise ValueError(f"unexpected age-adjustment header: {header}")
    mu0 = []
    sigma0 = None
    for row in reader:
        if row[0] == "sigma0":
            sigma0 = float(row[1])
            break
        mu0.append(float(row[1]))
    if sigma0 is None:
        raise ValueError("missing trailing sigma0 row")
    return AgeAdjustment(mu0_by_age=np.asarray(mu0), sigma0=sigma0, a_max=len(mu0) - 1)
