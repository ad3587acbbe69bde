"""PCA, probabilistic PCA and contrastive PCA reference methods."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from clvm import num_core
from clvm.errors import DimensionError
from clvm.num_core import LOG_2PI


@dataclass
class PpcaResult:
    loading: np.ndarray
    mean: np.ndarray
    sigma2: float
    eigenvalues: np.ndarray

    @property
    def cov(self):
        d = self.mean.size
        return self.loading @ self.loading.T + self.sigma2 * np.eye(d)

    def log_likelihood(self, data):
        return ppca_log_likelihood(data, self.loading, self.mean, self.sigma2)

    def transform(self, data):
        q = self.loading.shape[1]
        M = self.loading.T @ self.loading + self.sigma2 * np.eye(q)
        return np.linalg.solve(M, self.loading.T @ (np.asarray(data) - self.mean).T).T


def ppca_log_likelihood(data, loading, mean, sigma2):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    cov = loading @ loading.T + sigma2 * np.eye(d)
    chol = num_core.cholesky_jitter(cov)
    sol = linalg.solve_triangular(chol, (data - mean).T, lower=True, check_finite=False)
    return -0.5 * (n * (d * LOG_2PI + num_core.logdet_from_chol(chol)) + float(np.sum(sol * sol)))


def _ppca_from_cov(cov, mean, q):
    lam, vec = num_core.sym_eig(cov)
    d = lam.size
    sigma2 = float(np.mean(lam[q:]))
    if sigma2 <= 0:
        raise DimensionError("degenerate covariance: trailing eigenvalues are not positive")
    loading = vec[:, :q] * np.sqrt(np.maximum(lam[:q] - sigma2, 0.0))
    return PpcaResult(loading, mean, sigma2, lam)


def fit_ppca(data, q):
    """Closed-form maximum-likelihood probabilistic PCA.

    Loadings are the top-``q`` eigenvectors of the ML sample covariance
    scaled by ``sqrt(lambda - sigma2)``; ``sigma2`` is the mean of the
    trailing eigenvalues.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    if not 0 <= q < d:
        raise DimensionError(f"need 0 <= q < d (q={q}, d={d})")
    if n <= q:
        raise DimensionError(f"need more rows than components (n={n}, q={q})")
    mean = data.mean(axis=0)
    xc = data - mean
    return _ppca_from_cov(xc.T @ xc / n, mean, q)


def fit_ppca_pooled(pair, q):
    """PPCA on both sets stacked, each centered by its own mean.

    This is the closed-form optimum of the contrastive model with no target
    loading. Returns ``(result, mu_x, mu_y)``; ``result.mean`` is zero.
    """
    x_bar = pair.target.mean(axis=0)
    y_bar = pair.background.mean(axis=0)
    pooled = np.vstack([pair.target - x_bar, pair.background - y_bar])
    res = _ppca_from_cov(pooled.T @ pooled / pooled.shape[0], np.zeros(pair.d), q)
    return res, x_bar, y_bar


def pca(data, q):
    """Top-``q`` principal axes and scores of centered data."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    mean = data.mean(axis=0)
    xc = data - mean
    lam, vec = num_core.sym_eig(xc.T @ xc / data.shape[0])
    axes = vec[:, :q]
    return axes, xc @ axes, lam


@dataclass
class CpcaResult:
    alpha: float
    projection: np.ndarray
    latents: np.ndarray
    eigenvalues: np.ndarray


def contrastive_covariance(pair, alpha):
    """Target covariance minus ``alpha`` times background covariance.

    Each set is centered by its own mean before forming its covariance.
    """
    x = pair.target - pair.target.mean(axis=0)
    y = pair.background - pair.background.mean(axis=0)
    return x.T @ x / pair.n - alpha * (y.T @ y / pair.m)


def fit_cpca(pair, alpha, q):
    """Contrastive PCA: top-``q`` eigenvectors (algebraic order) of the contrastive covariance."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    C = num_core.symmetrize(contrastive_covariance(pair, alpha))
    lam, vec = num_core.sym_eig(C)
    proj = vec[:, :q]
    lat = (pair.target - pair.target.mean(axis=0)) @ proj
    return CpcaResult(float(alpha), proj, lat, lam)


def cpca_nullspace_limit(pair, q, rank_tol=1e-9):
    """PCA of the target after projecting onto the background null space.

    Raises :class:`DimensionError` when the background covariance has full
    rank (the large-alpha limit then has no null space to project onto).
    """
    y = pair.background - pair.background.mean(axis=0)
    bcov = y.T @ y / pair.m
    lam, vec = num_core.sym_eig(bcov)
    cutoff = rank_tol * max(float(lam[0]), 1.0)
    null = vec[:, lam <= cutoff]
    if null.shape[1] == 0:
        raise DimensionError("background covariance has full rank; null space is empty")
    if null.shape[1] < q:
        raise DimensionError(f"null space has dimension {null.shape[1]} < q={q}")
    x = pair.target - pair.target.mean(axis=0)
    proj_data = x @ null
    lam_t, vec_t = num_core.sym_eig(proj_data.T @ proj_data / pair.n)
    return null @ vec_t[:, :q]


def principal_angles(a, b):
    """Principal angles (radians, ascending) between the column spans of a and b."""
    return np.sort(linalg.subspace_angles(np.asarray(a), np.asarray(b)))
