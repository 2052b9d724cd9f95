"""Accuracy, interval and proper-scoring metrics for Gaussian predictive distributions.

Every score takes a predicted mean and a variance per element and treats the
pair as a Gaussian. Multi-output arrays are scored element-wise and averaged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

VAR_FLOOR = 1e-12
SQRT_PI = np.sqrt(np.pi)


@dataclass(frozen=True)
class Interval:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("interval lower bound exceeds upper bound")


def _flat(*arrays):
    out = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    sizes = {a.size for a in out}
    if len(sizes) != 1:
        raise ValueError(f"length mismatch: {[a.size for a in out]}")
    if 0 in sizes:
        raise ValueError("empty input")
    return out


def interval_from_variance(mu, var, alpha: float = 0.05) -> Interval:
    """Central Gaussian interval ``mu +- q * sigma`` with ``q = Phi^-1(1 - alpha/2)``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("interval_from_variance: negative variance")
    half = stats.norm.ppf(1.0 - alpha / 2.0) * np.sqrt(var)
    return Interval(mu - half, mu + half, alpha)


def picp(interval: Interval, y) -> float:
    """Fraction of targets inside their closed interval."""
    lo, hi, y = _flat(interval.lower, interval.upper, y)
    return float(np.mean((y >= lo) & (y <= hi)))


def mpiw(interval: Interval) -> float:
    lo, hi = _flat(interval.lower, interval.upper)
    return float(np.mean(hi - lo))


def winkler(interval: Interval, y, alpha: float | None = None) -> float:
    """Mean Winkler score: width, plus ``2/alpha`` times the miss distance."""
    alpha = interval.alpha if alpha is None else alpha
    lo, hi, y = _flat(interval.lower, interval.upper, y)
    score = (hi - lo) + (2.0 / alpha) * (np.maximum(lo - y, 0.0) + np.maximum(y - hi, 0.0))
    return float(np.mean(score))


def nll_score(mu, var, y) -> float:
    """Mean Gaussian negative log-likelihood, constant included; variance floored at 1e-12."""
    mu, var, y = _flat(mu, var, y)
    var = np.maximum(var, VAR_FLOOR)
    return float(np.mean(0.5 * np.log(2.0 * np.pi * var) + (y - mu) ** 2 / (2.0 * var)))


def crps_gaussian(mu, var, y) -> float:
    """Closed-form Gaussian CRPS, averaged; zero variance gives ``|y - mu|``."""
    mu, var, y = _flat(mu, var, y)
    sigma = np.sqrt(np.maximum(var, 0.0))
    out = np.abs(y - mu)
    pos = sigma > np.sqrt(VAR_FLOOR)
    s = sigma[pos]
    w = (y[pos] - mu[pos]) / s
    out[pos] = s * (w * (2.0 * stats.norm.cdf(w) - 1.0) + 2.0 * stats.norm.pdf(w) - 1.0 / SQRT_PI)
    return float(np.mean(out))


def ece_regression(mu, var, y, levels=10, scale: float = 100.0) -> float:
    """Quantile-calibration error of central intervals.

    ``levels`` is either a count ``L`` (nominal levels ``m / (L + 1)``,
    ``m = 1..L``) or an explicit sequence of levels in (0, 1). Returns the
    mean absolute gap between empirical coverage and nominal level, times
    ``scale`` (x100 by default).
    """
    mu, var, y = _flat(mu, var, y)
    if np.ndim(levels) == 0:
        if levels < 2:
            raise ValueError(f"ece_regression: need at least 2 levels, got {levels}")
        nominal = np.arange(1, levels + 1) / (levels + 1)
    else:
        nominal = np.asarray(levels, dtype=np.float64)
        if np.any((nominal <= 0) | (nominal >= 1)):
            raise ValueError("ece_regression: levels must lie in (0, 1)")
    sigma = np.sqrt(np.maximum(var, 0.0))
    # |y - mu| <= q * sigma with q = Phi^-1((1 + p) / 2)
    q = stats.norm.ppf(0.5 + nominal / 2.0)
    resid = np.abs(y - mu)
    coverage = (resid[None, :] <= q[:, None] * sigma[None, :]).mean(axis=1)
    return float(scale * np.mean(np.abs(coverage - nominal)))


def rmse(pred, y) -> float:
    pred, y = _flat(pred, y)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def correlation(a, b, kind: str = "spearman") -> float:
    """Pearson or Spearman (average ranks) coefficient.

    A constant input has no defined coefficient; the result is NaN and a
    ``RuntimeWarning`` names the degenerate argument.
    """
    a, b = _flat(a, b)
    if a.size < 3:
        raise ValueError(f"correlation: need at least 3 points, got {a.size}")
    if kind not in ("pearson", "spearman"):
        raise ValueError(f"correlation: unknown kind {kind!r}")
    for name, arr in (("a", a), ("b", b)):
        if np.ptp(arr) == 0:
            warnings.warn(f"correlation: argument {name} is constant; coefficient undefined", RuntimeWarning, stacklevel=2)
            return float("nan")
    if kind == "spearman":
        a, b = stats.rankdata(a), stats.rankdata(b)
    a = a - a.mean()
    b = b - b.mean()
    r = float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))
    return max(-1.0, min(1.0, r))


def score_component(mu, var, y, alpha: float = 0.05, ece_levels=10) -> dict[str, float]:
    """NLL, ECE, Winkler, MPIW, PICP and CRPS for one variance component."""
    interval = interval_from_variance(mu, var, alpha)
    return {
        "nll": nll_score(mu, var, y),
        "ece": ece_regression(mu, var, y, ece_levels),
        "winkler": winkler(interval, y),
        "mpiw": mpiw(interval),
        "picp": picp(interval, y),
        "crps": crps_gaussian(mu, var, y),
    }
