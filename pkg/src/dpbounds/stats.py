"""Sample statistics for Monte Carlo bound estimators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

__all__ = ["BoundEstimate", "summarize", "combined_se"]


@dataclass(frozen=True)
class BoundEstimate:
    """Plain Monte Carlo estimate with a two-sided normal confidence interval.

    ``sd`` is the sample standard deviation (divisor n-1); the reported
    ``half_width`` is z_{1-alpha/2} * sd / sqrt(count).
    """

    mean: float
    sd: float
    count: int
    level: float
    half_width: float

    @property
    def se(self) -> float:
        """Standard error of the mean."""
        return self.sd / np.sqrt(self.count)

    @property
    def interval(self) -> tuple[float, float]:
        return (self.mean - self.half_width, self.mean + self.half_width)


def summarize(samples, alpha: float = 0.05) -> BoundEstimate:
    """Mean, sample sd and confidence interval of a sample of reals."""
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size < 2:
        raise ValueError(f"need at least 2 samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples contain non-finite values")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * sd / np.sqrt(arr.size)
    return BoundEstimate(mean=mean, sd=sd, count=int(arr.size), level=alpha,
                         half_width=float(half))


def combined_se(reference_se: float, estimate: BoundEstimate) -> float:
    """Standard error of the difference between an estimate and an independent
    reference mean whose own standard error is ``reference_se``."""
    return float(np.hypot(reference_se, estimate.se))
