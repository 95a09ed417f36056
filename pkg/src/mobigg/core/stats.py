"""Statistical helpers: Poisson Chernoff thresholds, survival tails, merges."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .config import InvalidInput


def chernoff_poisson_threshold(mean: float, tail_prob: float, side: str = "lower") -> float:
    """Smallest deviation ``a`` such that the Poisson Chernoff bound at (1 -/+ a/mean) is <= tail_prob.

    Lower side: P[P <= (1-e) mean] <= exp(-mean e^2 / 2).
    Upper side: P[P >= (1+e) mean] <= exp(-mean e^2 / 2 * (1 - e/3)), valid for e < 1;
    returns ``inf`` when no e in (0, 1) achieves the requested tail.
    """
    if not mean > 0:
        raise InvalidInput("mean must be > 0")
    if not 0 < tail_prob <= 1:
        raise InvalidInput("tail_prob must lie in (0, 1)")
    target = math.log(1.0 / tail_prob)
    if target == 0:
        return 0.0
    if side == "lower":
        eps = math.sqrt(2.0 * target / mean)
        return mean * min(eps, 1.0)
    if side == "upper":
        f = lambda e: mean * e * e / 2 * (1 - e / 3) - target
        if f(1.0) < 0:
            return math.inf
        return mean * brentq(f, 0.0, 1.0, xtol=1e-14, rtol=1e-14)
    raise InvalidInput(f"side must be 'lower' or 'upper', got {side!r}")


def binomial_se(p, n):
    p = np.asarray(p, float)
    return np.sqrt(np.clip(p * (1 - p), 0, None) / max(n, 1))


@dataclass
class TailCurve:
    """Empirical survival P[T > t] on a time grid."""

    times: np.ndarray
    survival: np.ndarray
    std_error: np.ndarray
    trials: int

    def at(self, t: float) -> tuple[float, float]:
        """(survival, std_error) at the grid time closest to ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        return float(self.survival[i]), float(self.std_error[i])

    def merge(self, other: "TailCurve") -> "TailCurve":
        if len(self.times) != len(other.times) or not np.allclose(self.times, other.times):
            raise InvalidInput("tail curves live on different grids")
        n = self.trials + other.trials
        s = (self.survival * self.trials + other.survival * other.trials) / n
        return TailCurve(self.times.copy(), s, binomial_se(s, n), n)


def tail_from_steps(first_steps: np.ndarray, n_steps: int, dt: float) -> TailCurve:
    """Survival curve from per-trial first event step (-1 or > n_steps means no event)."""
    first_steps = np.asarray(first_steps, np.int64)
    trials = len(first_steps)
    hit = (first_steps >= 0) & (first_steps <= n_steps)
    counts = np.bincount(first_steps[hit], minlength=n_steps + 1)[: n_steps + 1]
    events_by = np.cumsum(counts)
    surv = 1.0 - events_by / max(trials, 1)
    times = np.arange(n_steps + 1) * dt
    return TailCurve(times, surv, binomial_se(surv, trials), trials)


def z_score(a: float, se_a: float, b: float, se_b: float = 0.0) -> float:
    s = math.hypot(se_a, se_b)
    if s == 0:
        return 0.0 if a == b else math.copysign(math.inf, a - b)
    return (a - b) / s


def linear_fit(x, y) -> dict:
    """Least-squares line y = slope * x + intercept with R^2."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2, "residuals": resid}
