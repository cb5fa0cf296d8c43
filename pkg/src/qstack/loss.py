"""Pinball loss and the scaled mean quantile loss.

The headline metric averages pinball losses over items, horizon steps, and
quantile levels, scaled by 2/q and normalized by the sum of absolute
actuals, so values are comparable across series of different magnitudes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import QuantileSpec, atomic_open, format_tau
from .errors import DimensionMismatch, ZeroDenominator


def pinball(z, zhat, tau):
    """Quantile loss max{tau*(z - zhat), (1 - tau)*(zhat - z)}.

    Vectorized over any broadcastable shapes; zero exactly when z == zhat.
    """
    z = np.asarray(z, dtype=float)
    zhat = np.asarray(zhat, dtype=float)
    tau = np.asarray(tau, dtype=float)
    diff = z - zhat
    out = np.maximum(tau * diff, (tau - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def _as_values(obj):
    return np.asarray(getattr(obj, "values", obj), dtype=float)


def _pinball_terms(pred, actuals, quantiles: QuantileSpec):
    pred = _as_values(pred)
    actual = _as_values(actuals)
    if pred.ndim != 3:
        raise DimensionMismatch(f"predictions must be (N, h, q), got {pred.shape}")
    if actual.shape != pred.shape[:2] or pred.shape[2] != quantiles.q:
        raise DimensionMismatch(
            f"predictions {pred.shape} do not match actuals {actual.shape} "
            f"and {quantiles.q} quantile levels"
        )
    taus = quantiles.as_array()
    return pinball(actual[:, :, None], pred, taus), actual


def mean_wql(pred, actuals, quantiles: QuantileSpec) -> float:
    """Scaled mean quantile loss of an (N, h, q) prediction tensor.

    Returns (2/q) * sum of pinball terms / sum of |actuals|.  Raises
    ZeroDenominator when every actual is zero.
    """
    terms, actual = _pinball_terms(pred, actuals, quantiles)
    denom = np.abs(actual).sum()
    if denom == 0.0:
        raise ZeroDenominator("all actuals are zero")
    return float(2.0 / quantiles.q * terms.sum() / denom)


def per_quantile_wql(pred, actuals, quantiles: QuantileSpec) -> np.ndarray:
    """Per-level scaled losses; their mean equals mean_wql."""
    terms, actual = _pinball_terms(pred, actuals, quantiles)
    denom = np.abs(actual).sum()
    if denom == 0.0:
        raise ZeroDenominator("all actuals are zero")
    return 2.0 * terms.sum(axis=(0, 1)) / denom


@dataclass(frozen=True)
class LossReport:
    """Scores for one strategy on one backtest window."""

    strategy: str
    window: int
    mean_wql: float
    per_tau: tuple[float, ...]
    taus: tuple[float, ...]


def score(strategy: str, window: int, pred, actuals, quantiles: QuantileSpec) -> LossReport:
    per_tau = per_quantile_wql(pred, actuals, quantiles)
    return LossReport(
        strategy=strategy,
        window=window,
        mean_wql=float(per_tau.mean()),
        per_tau=tuple(float(v) for v in per_tau),
        taus=quantiles.taus,
    )


def write_loss_reports(reports, path) -> None:
    """Serialize reports as ``strategy,window,tau,loss`` rows.

    Each report contributes one row per quantile level plus a summary row
    with tau column 'all' carrying the mean.
    """
    with atomic_open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["strategy", "window", "tau", "loss"])
        for report in reports:
            for tau, value in zip(report.taus, report.per_tau):
                writer.writerow(
                    [report.strategy, report.window, format_tau(tau), repr(value)]
                )
            writer.writerow(
                [report.strategy, report.window, "all", repr(report.mean_wql)]
            )
