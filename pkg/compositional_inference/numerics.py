"""
Dense linear algebra and random-number helpers shared by every other module.

Matrices are plain ``numpy.ndarray`` objects. Factorisations are delegated to
``scipy.linalg``; this module only adds the symmetrisation/jitter repair that
long filter runs need and maps LAPACK failures onto the package's typed errors.
"""

import logging
from typing import Union

import numpy as np
import scipy.linalg

from compositional_inference.exceptions import NonConvergence, NonFinite, NotSPD

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42
SYMMETRY_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """
    Coerce ``a`` to a finite two-dimensional float array.

    Args:
        a: Array-like input
        name: Label used in error messages

    Returns:
        A float64 copy of ``a``

    Raises:
        NonFinite: If any entry is NaN or infinite
        ValueError: If ``a`` is not two-dimensional
    """
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        logger.error(f"{name} contains non-finite entries")
        raise NonFinite(f"{name} contains non-finite entries")
    return m


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return (a + aᵀ)/2."""
    return 0.5 * (a + a.T)


def is_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    """Symmetry check relative to the largest entry magnitude."""
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return bool(np.max(np.abs(a - a.T), initial=0.0) <= tol * scale)


def cholesky(a) -> np.ndarray:
    """
    Lower-triangular Cholesky factor ``L`` with ``L @ L.T == a``.

    A failed factorisation is retried once on the symmetrised matrix with
    ``1e-12 * trace / n`` added to the diagonal.

    Args:
        a: Symmetric positive definite matrix

    Returns:
        Lower-triangular factor

    Raises:
        NotSPD: If the repaired matrix is still not positive definite
    """
    m = as_matrix(a, "cholesky input")
    if m.shape[0] != m.shape[1]:
        raise NotSPD(f"Cholesky input must be square, got shape {m.shape}")
    try:
        return scipy.linalg.cholesky(m, lower=True)
    except scipy.linalg.LinAlgError:
        n = m.shape[0]
        jitter = 1e-12 * float(np.trace(m)) / n
        logger.debug(f"Cholesky failed, retrying with jitter {jitter:.3e}")
        repaired = symmetrize(m) + jitter * np.eye(n)
        try:
            return scipy.linalg.cholesky(repaired, lower=True)
        except scipy.linalg.LinAlgError as e:
            logger.error(f"Matrix is not SPD after jitter repair: {e}")
            raise NotSPD(f"Matrix is not positive definite after jitter repair: {e}") from e


def sym_eig(a):
    """
    Spectral decomposition of a symmetric matrix.

    Args:
        a: Symmetric matrix

    Returns:
        Tuple ``(eigenvalues ascending, orthonormal eigenvectors as columns)``

    Raises:
        NonConvergence: If LAPACK fails to converge
    """
    m = symmetrize(as_matrix(a, "eigen input"))
    try:
        return scipy.linalg.eigh(m)
    except scipy.linalg.LinAlgError as e:
        logger.error(f"Symmetric eigensolver did not converge: {e}")
        raise NonConvergence(f"Symmetric eigensolver did not converge: {e}") from e


def matrix_exp_neg(laplacian, beta: float) -> np.ndarray:
    """
    exp(-beta * L) for a symmetric positive semidefinite ``L``.

    Args:
        laplacian: Symmetric PSD matrix (typically a graph Laplacian)
        beta: Non-negative diffusion scale

    Returns:
        Symmetric matrix exponential
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    eigenvalues, vectors = sym_eig(laplacian)
    result = (vectors * np.exp(-beta * eigenvalues)) @ vectors.T
    return symmetrize(result)


def make_rng(seed: Union[int, None] = DEFAULT_SEED) -> np.random.Generator:
    """PCG64 generator for ``seed``."""
    return np.random.default_rng(seed)


def mvn_sample(belief, rng: np.random.Generator) -> np.ndarray:
    """
    Draw one sample from a Gaussian belief.

    Args:
        belief: Object with ``mean`` and ``cov`` arrays
        rng: Generator owned by the caller

    Returns:
        Sample vector; the mean itself when the covariance is identically zero

    Raises:
        NotSPD: If the covariance is neither zero nor positive definite
    """
    mean = np.asarray(belief.mean, dtype=float)
    cov = np.asarray(belief.cov, dtype=float)
    if not np.any(cov):
        return mean.copy()
    factor = cholesky(cov)
    return mean + factor @ rng.standard_normal(mean.shape[0])
