"""
Sparse identification of interface laws from acceleration records.

Accelerations are integrated twice with the trapezoidal rule, each integral
passed once through a causal first-order high-pass filter to remove drift.
The relative kinematics are expanded in a fixed six-column library and
the force coefficients are found by sequentially thresholded least squares.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.integrate
import scipy.signal

from compositional_inference.exceptions import InvalidParams, LengthMismatch, RankDeficient, TooFewSamples
from compositional_inference.interface_laws import LIBRARY_COLUMNS, LearnedLaw

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SindyConfig:
    threshold: float = 1.0
    max_iters: int = 10
    normalize_columns: bool = True
    highpass_cutoff: float = 0.05
    dt: float = 1e-3
    trim_seconds: float = 1.0

    def __post_init__(self):
        if self.threshold <= 0:
            raise InvalidParams(f"threshold must be positive, got {self.threshold}")
        if self.max_iters < 1:
            raise InvalidParams(f"max_iters must be >= 1, got {self.max_iters}")
        if self.dt <= 0 or self.highpass_cutoff <= 0:
            raise InvalidParams("dt and highpass_cutoff must be positive")


def _highpass(signal: np.ndarray, dt: float, cutoff: float) -> np.ndarray:
    # Bilinear single pole; gain 1/sqrt(2) at the cutoff
    b, a = scipy.signal.butter(1, cutoff, btype="highpass", fs=1.0 / dt)
    return scipy.signal.lfilter(b, a, signal)


def reconstruct_kinematics(accel, dt: float, cutoff: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """
    Displacement and velocity from an acceleration record.

    Args:
        accel: Acceleration samples in m/s²
        dt: Sample spacing in seconds
        cutoff: High-pass cutoff in Hz

    Returns:
        Tuple (displacement, velocity)

    Raises:
        TooFewSamples: With fewer than three samples
    """
    a = np.asarray(accel, dtype=float).reshape(-1)
    if a.shape[0] < 3:
        raise TooFewSamples(f"Need at least 3 acceleration samples, got {a.shape[0]}")
    if dt <= 0:
        raise InvalidParams(f"dt must be positive, got {dt}")
    velocity = _highpass(scipy.integrate.cumulative_trapezoid(a, dx=dt, initial=0.0), dt, cutoff)
    displacement = _highpass(scipy.integrate.cumulative_trapezoid(velocity, dx=dt, initial=0.0), dt, cutoff)
    return displacement, velocity


def build_library(dx, dv) -> np.ndarray:
    """
    Candidate library [Δx, Δv, Δx³, |Δv|Δv, ΔxΔv, 1], one row per sample.

    Raises:
        LengthMismatch: If the two series differ in length
    """
    dx = np.asarray(dx, dtype=float).reshape(-1)
    dv = np.asarray(dv, dtype=float).reshape(-1)
    if dx.shape != dv.shape:
        raise LengthMismatch(f"dx has {dx.shape[0]} samples but dv has {dv.shape[0]}")
    return np.column_stack([dx, dv, dx ** 3, np.abs(dv) * dv, dx * dv, np.ones_like(dx)])


def stlsq(theta, target, config: SindyConfig = SindyConfig()) -> np.ndarray:
    """
    Sequentially thresholded least squares.

    Alternates a dense least-squares fit on the active columns with zeroing
    every coefficient whose magnitude (in original column units) falls
    below ``config.threshold``, until the active set stops changing or
    ``config.max_iters`` is reached.

    Args:
        theta: Library matrix, samples × columns
        target: Regression target
        config: Threshold and iteration settings

    Returns:
        Coefficient vector over all library columns

    Raises:
        LengthMismatch: If rows and target length differ
        RankDeficient: If the active columns are linearly dependent
    """
    theta = np.asarray(theta, dtype=float)
    target = np.asarray(target, dtype=float).reshape(-1)
    if theta.shape[0] != target.shape[0]:
        raise LengthMismatch(f"Library has {theta.shape[0]} rows, target has {target.shape[0]}")
    n_cols = theta.shape[1]
    norms = np.linalg.norm(theta, axis=0)
    active = norms > 0
    scale = np.where(active, norms, 1.0) if config.normalize_columns else np.ones(n_cols)
    scaled = theta / scale
    xi = np.zeros(n_cols)

    for iteration in range(config.max_iters):
        columns = np.flatnonzero(active)
        xi = np.zeros(n_cols)
        if columns.size == 0:
            break
        if theta.shape[0] < columns.size or np.linalg.matrix_rank(scaled[:, columns]) < columns.size:
            logger.error(f"Active library columns {columns.tolist()} are rank deficient")
            raise RankDeficient(f"Active library columns {columns.tolist()} are rank deficient")
        solution, *_ = np.linalg.lstsq(scaled[:, columns], target, rcond=None)
        xi[columns] = solution / scale[columns]
        keep = active & (np.abs(xi) >= config.threshold)
        logger.debug(f"STLSQ iteration {iteration}: {int(keep.sum())} active terms")
        if np.array_equal(keep, active):
            break
        active = keep
    xi[~active] = 0.0
    return xi


@dataclass(frozen=True)
class InterfaceFit:
    law: LearnedLaw
    displacement: np.ndarray
    velocity: np.ndarray
    residual_rms: float

    def to_dict(self):
        return {"coefficients": self.law.to_dict(), "residual_rms": self.residual_rms}


def fit_interface_law(accel_a, accel_b, force, config: SindyConfig = SindyConfig()) -> InterfaceFit:
    """
    Learn F(Δx, Δv) for the interface between two measured masses.

    Δ is taken as (mass a) − (mass b), matching the orientation used by
    ``LearnedEdgeLaw``. The reconstructed displacement has passed two
    high-pass stages and the velocity one, so the velocity and the force
    target get the missing stages before regression and every column shares
    the same phase lead. ``config.trim_seconds`` are dropped at both ends of
    the record to exclude filter edge transients.
    """
    accel_a = np.asarray(accel_a, dtype=float)
    accel_b = np.asarray(accel_b, dtype=float)
    force = np.asarray(force, dtype=float)
    if not accel_a.shape == accel_b.shape == force.shape:
        raise LengthMismatch("Acceleration and force records must have equal lengths")
    x_a, v_a = reconstruct_kinematics(accel_a, config.dt, config.highpass_cutoff)
    x_b, v_b = reconstruct_kinematics(accel_b, config.dt, config.highpass_cutoff)
    dx = x_a - x_b
    dv = _highpass(v_a - v_b, config.dt, config.highpass_cutoff)
    target = _highpass(_highpass(force, config.dt, config.highpass_cutoff), config.dt, config.highpass_cutoff)
    trim = int(round(config.trim_seconds / config.dt))
    window = slice(trim, force.shape[0] - trim)
    if target[window].shape[0] < len(LIBRARY_COLUMNS):
        raise TooFewSamples("Record too short after trimming")
    theta = build_library(dx[window], dv[window])
    xi = stlsq(theta, target[window], config)
    residual = target[window] - theta @ xi
    rms = float(np.sqrt(np.mean(residual ** 2)))
    logger.info(f"Learned interface law k={xi[0]:.6g}, c={xi[1]:.6g}, residual RMS {rms:.3g} N")
    return InterfaceFit(LearnedLaw(xi), dx, dv, rms)
