"""Dense linear algebra, Gaussians, seeded randomness and quadrature.

These are the numerical primitives every other module builds on, and the
independent oracles (generic Gaussian conditioning, explicit densities,
adaptive quadrature) that the model code is tested against.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg

from clvm import _backend
from clvm.errors import (
    ConditioningError,
    DimensionError,
    FactorizationError,
    IntegrationError,
)

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def symmetrize(a):
    return 0.5 * (a + a.T)


def sym_eig(a, sym_tol=1e-10):
    """Eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    a : (n, n) array_like
        Symmetric input. Asymmetry larger than ``sym_tol * (1 + max|a|)``
        raises :class:`DimensionError`.

    Returns
    -------
    w : (n,) ndarray
        Eigenvalues in descending order.
    v : (n, n) ndarray
        Orthonormal eigenvectors as columns; each column's first
        non-negligible component is positive so the output is deterministic.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    if a.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    if not np.all(np.isfinite(a)):
        raise DimensionError("sym_eig input has non-finite entries")
    asym = np.max(np.abs(a - a.T))
    if asym > sym_tol * (1.0 + np.max(np.abs(a))):
        raise DimensionError(f"sym_eig input is not symmetric (max asymmetry {asym:.3e})")
    w, v, _ = _backend.jacobi_eigh(symmetrize(a))
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    for j in range(v.shape[1]):
        col = v[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return w, v


def cholesky_jitter(a):
    """Lower Cholesky factor of ``a``, adding diagonal jitter if needed.

    Jitter climbs from 1e-10 by factors of ten up to 1e-4 (scaled by the
    mean diagonal) before :class:`FactorizationError` is raised.
    """
    a = symmetrize(as_matrix(a))
    if not np.all(np.isfinite(a)):
        raise FactorizationError("matrix has non-finite entries")
    try:
        return linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.abs(np.diag(a)))), 1.0)
    jitter = JITTER_START
    eye = np.eye(a.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(a + jitter * scale * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError("matrix is not positive definite even with jitter 1e-4")


def chol_solve(chol, b):
    return linalg.cho_solve((chol, True), b, check_finite=False)


def spd_inverse(a):
    chol = cholesky_jitter(a)
    return chol_solve(chol, np.eye(a.shape[0]))


def logdet_from_chol(chol):
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class GaussianSpec:
    """Multivariate normal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(f"mean {mean.shape} and cov {cov.shape} disagree")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12 * (1.0 + np.max(np.abs(cov), initial=0.0)):
            raise DimensionError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


def gaussian_condition(joint, observed_indices, observed_values):
    """Condition a joint Gaussian on some coordinates (Schur complement).

    Returns the :class:`GaussianSpec` of the unobserved coordinates, in
    increasing index order.
    """
    obs = np.asarray(observed_indices, dtype=int).ravel()
    vals = np.asarray(observed_values, dtype=np.float64).ravel()
    d = joint.dim
    if obs.size != vals.size:
        raise DimensionError("observed indices and values differ in length")
    if np.unique(obs).size != obs.size:
        raise DimensionError("observed indices must be distinct")
    if obs.size and (obs.min() < 0 or obs.max() >= d):
        raise DimensionError(f"observed index out of range for dimension {d}")
    hid = np.setdiff1d(np.arange(d), obs)
    if obs.size == 0:
        return GaussianSpec(joint.mean.copy(), joint.cov.copy())

    c_oo = joint.cov[np.ix_(obs, obs)]
    c_ho = joint.cov[np.ix_(hid, obs)]
    c_hh = joint.cov[np.ix_(hid, hid)]
    try:
        chol = linalg.cholesky(symmetrize(c_oo), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ConditioningError("observed-block covariance is singular") from exc
    if np.min(np.diag(chol)) <= 1e-150:
        raise ConditioningError("observed-block covariance is singular")
    gain = chol_solve(chol, c_ho.T).T
    mean = joint.mean[hid] + gain @ (vals - joint.mean[obs])
    cov = symmetrize(c_hh - gain @ c_ho.T)
    return GaussianSpec(mean, cov)


def gauss_logpdf(x, spec):
    """Log density of one point (d,) or a batch of rows (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != spec.dim:
        raise DimensionError(f"point dimension {xs.shape[1]} != {spec.dim}")
    try:
        chol = linalg.cholesky(symmetrize(spec.cov), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise FactorizationError("covariance is not positive definite") from exc
    resid = xs - spec.mean
    sol = linalg.solve_triangular(chol, resid.T, lower=True, check_finite=False)
    quad = np.sum(sol * sol, axis=0)
    out = -0.5 * (spec.dim * LOG_2PI + logdet_from_chol(chol) + quad)
    return float(out[0]) if single else out


def quadrature_1d(f, lower, upper, tolerance=1e-10, limit=500):
    """Adaptive Gauss-Kronrod integral of ``f`` over ``[lower, upper]``.

    Infinite bounds are allowed. Raises :class:`IntegrationError` when the
    reported error estimate exceeds ``tolerance``.
    """
    value, err = integrate.quad(f, lower, upper, epsabs=tolerance, epsrel=0.0, limit=limit)
    if not np.isfinite(value) or err > tolerance:
        raise IntegrationError(f"quadrature error {err:.3e} exceeds tolerance {tolerance:.3e}")
    return float(value)


class RngStream:
    """Seeded random stream with deterministic named / indexed children.

    Wraps a PCG64 :class:`numpy.random.Generator`. Children derived with
    :meth:`child` depend only on the parent seed and the key, never on how
    many draws the parent has made.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._spawn_key = tuple(_spawn_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))
        self.counter = 0

    def child(self, key):
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return RngStream(self.seed, self._spawn_key + (int(key),))

    def normal(self, size=None, loc=0.0, scale=1.0):
        self.counter += 1
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        self.counter += 1
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        self.counter += 1
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        self.counter += 1
        return self.generator.choice(a, size=size, replace=replace)


def as_stream(rng):
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))
