"""
Accuracy and calibration metrics, and the runtime-scaling harness.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import scipy.stats

from compositional_inference.exceptions import InvalidParams, LengthMismatch, NonPositiveVariance

logger = logging.getLogger(__name__)

COVERAGE_LEVELS = (0.68, 0.95)


def _aligned(est, truth):
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise LengthMismatch(f"Estimate shape {est.shape} differs from truth shape {truth.shape}")
    if est.size == 0:
        raise LengthMismatch("Series must contain at least one sample")
    return est, truth


def rmse(est, truth) -> float:
    """√(mean squared error) over all samples."""
    est, truth = _aligned(est, truth)
    return float(np.sqrt(np.mean((est - truth) ** 2)))


class NrmseResult(NamedTuple):
    value: float
    fallback: bool


def nrmse(est, truth) -> NrmseResult:
    """
    RMSE divided by the range of ``truth``.

    A constant truth has no range; the RMSE is then divided by the truth's
    magnitude instead and ``fallback`` is set.
    """
    error = rmse(est, truth)
    truth = np.asarray(truth, dtype=float)
    spread = float(truth.max() - truth.min())
    if spread > 0:
        return NrmseResult(error / spread, False)
    magnitude = float(np.abs(truth).mean())
    logger.warning(f"Truth has zero range; normalising RMSE by its magnitude {magnitude:.6g}")
    return NrmseResult(error / magnitude if magnitude > 0 else error, True)


def coverage(truth, mean, variance, level: float = 0.95) -> float:
    """
    Fraction of samples whose truth lies within mean ± z·σ.

    z is the two-sided Gaussian quantile for ``level``.
    """
    if not 0.0 < level < 1.0:
        raise InvalidParams(f"Coverage level must lie in (0, 1), got {level}")
    mean, truth = _aligned(mean, truth)
    variance = np.asarray(variance, dtype=float)
    if variance.shape != truth.shape:
        raise LengthMismatch(f"Variance shape {variance.shape} differs from truth shape {truth.shape}")
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    half_width = z * np.sqrt(np.clip(variance, 0.0, None))
    return float(np.mean(np.abs(truth - mean) <= half_width))


def nll(truth, mean, variance) -> float:
    """
    Time-averaged Gaussian negative log-likelihood.

    Rows are time steps and columns channels; channel terms are summed and
    the sum averaged over steps.

    Raises:
        NonPositiveVariance: If any variance is zero or negative
    """
    mean, truth = _aligned(mean, truth)
    variance = np.asarray(variance, dtype=float)
    if variance.shape != truth.shape:
        raise LengthMismatch(f"Variance shape {variance.shape} differs from truth shape {truth.shape}")
    if np.any(variance <= 0):
        logger.error("NLL requested with a non-positive variance")
        raise NonPositiveVariance("All variances must be strictly positive for the NLL")
    terms = 0.5 * (np.log(2.0 * np.pi * variance) + (truth - mean) ** 2 / variance)
    if terms.ndim == 1:
        return float(terms.mean())
    return float(terms.reshape(terms.shape[0], -1).sum(axis=1).mean())


@dataclass
class MetricReport:
    """Metrics of one estimation method."""

    method: str
    rmse: Dict[str, float] = field(default_factory=dict)
    nrmse: Dict[str, float] = field(default_factory=dict)
    nrmse_fallback: List[str] = field(default_factory=list)
    coverage: Dict[str, float] = field(default_factory=dict)
    nll: Optional[float] = None
    wall_clock: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    def add_accuracy(self, quantity: str, est, truth):
        self.rmse[quantity] = rmse(est, truth)
        result = nrmse(est, truth)
        self.nrmse[quantity] = result.value
        if result.fallback:
            self.nrmse_fallback.append(quantity)

    def add_calibration(self, truth, mean, variance, levels: Sequence[float] = COVERAGE_LEVELS):
        for level in levels:
            self.coverage[f"{level:.2f}"] = coverage(truth, mean, variance, level)
        self.nll = nll(truth, mean, variance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "rmse": dict(self.rmse),
            "nrmse": dict(self.nrmse),
            "nrmse_fallback": list(self.nrmse_fallback),
            "coverage": dict(self.coverage),
            "nll": self.nll,
            "wall_clock_seconds": self.wall_clock,
            **self.extra,
        }


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=float)
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(sizes <= 0):
        raise InvalidParams("Sizes and timings must be positive to fit a log-log slope")
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


@dataclass
class ScalingResult:
    sizes: List[int]
    timings: Dict[str, List[float]]
    slopes: Dict[str, float]

    def to_dict(self) -> Dict[str, Any]:
        return {"sizes": list(self.sizes), "timings": dict(self.timings), "slopes": dict(self.slopes)}


def scaling_study(
    sizes: Sequence[int],
    runners: Mapping[str, Callable[[int], Any]],
    repeats: int = 3,
    clock: Callable[[], float] = time.perf_counter,
) -> ScalingResult:
    """
    Time every runner at every size and fit its log-log runtime slope.

    Each (runner, size) pair is timed ``repeats`` times and the median kept.

    Args:
        sizes: System sizes, at least four spanning a factor of four
        runners: Callable per method, invoked with the size
        repeats: Timing repetitions per point
        clock: Monotonic clock in seconds

    Returns:
        Median timings and fitted slopes per runner
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 4 or max(sizes) < 4 * min(sizes):
        raise InvalidParams(f"Need at least 4 sizes spanning 4x, got {sizes}")
    if repeats < 1:
        raise InvalidParams(f"repeats must be >= 1, got {repeats}")
    timings: Dict[str, List[float]] = {name: [] for name in runners}
    for size in sizes:
        for name, runner in runners.items():
            samples = []
            for _ in range(repeats):
                tic = clock()
                runner(size)
                samples.append(clock() - tic)
            timings[name].append(float(np.median(samples)))
            logger.debug(f"{name} at size {size}: {timings[name][-1]:.4g} s")
    slopes = {name: loglog_slope(sizes, values) for name, values in timings.items()}
    logger.info(f"Scaling slopes: {slopes}")
    return ScalingResult(sizes, timings, slopes)
