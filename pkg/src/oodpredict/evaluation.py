"""Scoring harness: how well does a metric predict the true test error?

Works on flat lists of :class:`PredictionRecord` rows, one per
(shift dataset, method) pair.  Per method we fit a simple least-squares line
of true error on the prediction and report the coefficient of determination
and Spearman rank correlation; residual vectors feed the cross-method
correlation matrix, and z-score averaging implements the two-method
ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "PredictionRecord",
    "EvalReport",
    "fit_eval",
    "residual_correlation",
    "ensemble_zscore",
    "ensemble_zscore_many",
    "calibrate_and_predict",
    "spearman_rho",
    "midranks",
]


@dataclass(frozen=True)
class PredictionRecord:
    """One (dataset, method) evaluation row."""

    dataset_id: str
    family: str
    severity: float
    method: str
    prediction: float
    true_error: float

    def __post_init__(self):
        if not np.isfinite(self.prediction) or not np.isfinite(self.severity):
            raise ValueError("prediction and severity must be finite")
        if not 0.0 <= self.true_error <= 1.0:
            raise ValueError(f"true_error must lie in [0, 1], got {self.true_error}")


@dataclass(frozen=True)
class EvalReport:
    """Per-method regression summary over a fixed record set."""

    method: str
    r_squared: float
    spearman_rho: float
    slope: float
    intercept: float
    residuals: np.ndarray
    dataset_ids: tuple[str, ...]


def midranks(values) -> np.ndarray:
    """Ranks starting at 1, with ties replaced by their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0])
    i = 0
    while i < v.shape[0]:
        j = i
        while j + 1 < v.shape[0] and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt(np.sum(ac * ac) * np.sum(bc * bc))
    if denom == 0.0:
        raise ValueError("Pearson correlation undefined for a zero-variance vector")
    return float(np.dot(ac, bc) / denom)


def spearman_rho(x, y) -> float:
    """Rank correlation with midranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman_rho expects two equal-length vectors")
    return _pearson(midranks(x), midranks(y))


def fit_eval(records: Sequence[PredictionRecord]) -> EvalReport:
    """Least-squares fit of true error on one method's predictions.

    Requires at least three records from a single method with non-constant
    predictions.  ``r_squared`` is 1 - SS_res / SS_tot of the fitted line
    (equivalently the squared Pearson correlation for this simple
    regression).
    """
    if len(records) < 3:
        raise ValueError("fit_eval needs at least 3 records")
    methods = {r.method for r in records}
    if len(methods) != 1:
        raise ValueError(f"records mix methods: {sorted(methods)}")
    x = np.array([r.prediction for r in records])
    y = np.array([r.true_error for r in records])
    if np.ptp(x) == 0.0:
        raise ValueError("degenerate regressor: all predictions are equal")

    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    residuals = y - (slope * x + intercept)
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot

    ranks_x, ranks_y = midranks(x), midranks(y)
    if np.ptp(ranks_y) == 0.0:
        rho = 0.0  # all true errors tied: any ranking is as good as any other
    else:
        rho = _pearson(ranks_x, ranks_y)

    return EvalReport(
        method=records[0].method,
        r_squared=r_squared,
        spearman_rho=rho,
        slope=slope,
        intercept=intercept,
        residuals=residuals,
        dataset_ids=tuple(r.dataset_id for r in records),
    )


def residual_correlation(reports: Sequence[EvalReport]) -> np.ndarray:
    """Pearson correlation of residual vectors for every pair of methods.

    All reports must cover the identical datasets in the same order.  The
    result is symmetric with an exact unit diagonal.
    """
    if not reports:
        raise ValueError("residual_correlation needs at least one report")
    ids = reports[0].dataset_ids
    for rep in reports[1:]:
        if rep.dataset_ids != ids:
            raise ValueError(
                f"record sets differ between methods {reports[0].method!r} and {rep.method!r}"
            )
    size = len(reports)
    corr = np.eye(size)
    for i in range(size):
        for j in range(i + 1, size):
            corr[i, j] = corr[j, i] = _pearson(reports[i].residuals, reports[j].residuals)
    return corr


def ensemble_zscore(values_a, values_b) -> np.ndarray:
    """Elementwise mean of the two inputs' z-scores (population std)."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    if a.shape[0] < 2:
        raise ValueError("need at least two values to standardize")
    std_a, std_b = a.std(), b.std()
    if std_a == 0.0 or std_b == 0.0:
        raise ValueError("zero-variance input cannot be standardized")
    return ((a - a.mean()) / std_a + (b - b.mean()) / std_b) / 2.0


def ensemble_zscore_many(value_lists: Sequence) -> np.ndarray:
    """n-way mean of z-scores; plumbing beyond the two-method ensemble."""
    arrays = [np.asarray(v, dtype=np.float64) for v in value_lists]
    if not arrays:
        raise ValueError("need at least one value list")
    if any(a.shape != arrays[0].shape or a.ndim != 1 for a in arrays):
        raise ValueError("all value lists must be equal-length vectors")
    zs = []
    for a in arrays:
        std = a.std()
        if std == 0.0:
            raise ValueError("zero-variance input cannot be standardized")
        zs.append((a - a.mean()) / std)
    return np.mean(zs, axis=0)


def calibrate_and_predict(
    fit_records: Sequence[PredictionRecord], apply_records: Sequence[PredictionRecord]
) -> tuple[np.ndarray, float]:
    """Fit a line on one record set, read error estimates off another.

    Returns the per-record predicted errors for ``apply_records`` (same [0, 1]
    units as ``true_error``) and their mean squared deviation from the truth.
    """
    report = fit_eval(fit_records)
    raw = np.array([r.prediction for r in apply_records])
    truth = np.array([r.true_error for r in apply_records])
    predicted = report.slope * raw + report.intercept
    mse = float(np.mean((predicted - truth) ** 2)) if predicted.size else 0.0
    return predicted, mse
