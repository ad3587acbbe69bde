"""Gaussian contrastive latent variable model fitted by EM.

Target rows follow ``x = S z + W t + mu_x + eps`` and background rows
``y = S z + mu_y + eps`` with standard-normal latents and isotropic noise.
The E-step uses the exact joint posterior of ``(t, z)``; the M-step
maximizes the expected complete-data log-likelihood jointly over
``(W, S, mu_x, mu_y)`` and then ``sigma2``, so every iteration is a true EM
step and the log-likelihood trace is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from clvm import num_core
from clvm.errors import DimensionError, FactorizationError, MissingDataError
from clvm.num_core import LOG_2PI, RngStream

SIGMA2_FLOOR = 1e-8


@dataclass
class ClvmParams:
    """Loadings ``S`` (d x k) and ``W`` (d x t), set means and noise variance."""

    S: np.ndarray
    W: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=np.float64))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.mu_x = np.asarray(self.mu_x, dtype=np.float64).ravel()
        self.mu_y = np.asarray(self.mu_y, dtype=np.float64).ravel()
        self.sigma2 = float(self.sigma2)
        d = self.mu_x.size
        if self.S.shape[0] != d and self.S.size == 0:
            self.S = np.zeros((d, 0))
        if self.W.shape[0] != d and self.W.size == 0:
            self.W = np.zeros((d, 0))
        if self.S.shape[0] != d or self.W.shape[0] != d or self.mu_y.size != d:
            raise DimensionError(
                f"inconsistent shapes S{self.S.shape} W{self.W.shape} mu_x{self.mu_x.shape} mu_y{self.mu_y.shape}"
            )
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise DimensionError(f"sigma2 must be a non-negative finite number, got {self.sigma2}")
        for name in ("S", "W", "mu_x", "mu_y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DimensionError(f"{name} has non-finite entries")

    @property
    def d(self):
        return self.mu_x.size

    @property
    def k(self):
        return self.S.shape[1]

    @property
    def t(self):
        return self.W.shape[1]

    def copy(self):
        return ClvmParams(self.S.copy(), self.W.copy(), self.mu_x.copy(), self.mu_y.copy(), self.sigma2)

    def target_cov(self):
        return self.W @ self.W.T + self.S @ self.S.T + self.sigma2 * np.eye(self.d)

    def background_cov(self):
        return self.S @ self.S.T + self.sigma2 * np.eye(self.d)


@dataclass
class PosteriorMoments:
    """Posterior moments for one row. ``mean_t``/``Ett``/``Ezt`` are None for background rows."""

    mean_z: np.ndarray
    mean_t: np.ndarray | None
    Ezz: np.ndarray
    Ett: np.ndarray | None
    Ezt: np.ndarray | None
    cov: np.ndarray


@dataclass
class FittedModel:
    params: ClvmParams
    trace: list
    converged: bool
    n_iter: int
    target_t: np.ndarray
    target_z: np.ndarray
    background_z: np.ndarray
    method: str = "em"
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def _loading(params, is_target):
    return np.hstack([params.W, params.S]) if is_target else params.S


def _posterior_operator(params, is_target):
    """Return ``(gain, cov)`` with posterior mean ``gain @ (row - mu)``.

    For target rows the latent vector is ``(t, z)``; for background rows it
    is ``z``. ``cov = sigma2 * (A^T A + sigma2 I)^-1`` for loading ``A``.
    """
    A = _loading(params, is_target)
    q = A.shape[1]
    prec = A.T @ A + params.sigma2 * np.eye(q)
    if q == 0:
        return np.zeros((0, params.d)), np.zeros((0, 0))
    chol = num_core.cholesky_jitter(prec)
    gain = num_core.chol_solve(chol, A.T)
    cov = params.sigma2 * num_core.chol_solve(chol, np.eye(q))
    return gain, num_core.symmetrize(cov)


def posterior_moments(params, row, is_target):
    """Exact Gaussian posterior moments of the latents of one complete row."""
    row = np.asarray(row, dtype=np.float64).ravel()
    if row.size != params.d:
        raise DimensionError(f"row has {row.size} entries, model has d={params.d}")
    if not np.all(np.isfinite(row)):
        raise MissingDataError("posterior_moments needs a complete row")
    mu = params.mu_x if is_target else params.mu_y
    gain, cov = _posterior_operator(params, is_target)
    mean = gain @ (row - mu)
    second = cov + np.outer(mean, mean)
    if not is_target:
        return PosteriorMoments(mean, None, second, None, None, cov)
    t = params.t
    return PosteriorMoments(
        mean_z=mean[t:],
        mean_t=mean[:t],
        Ezz=second[t:, t:],
        Ett=second[:t, :t],
        Ezt=second[t:, :t],
        cov=cov,
    )


def transform(params, rows, is_target):
    """Posterior latent means per row: ``(t_means, z_means)``.

    ``t_means`` is None for background rows.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != params.d:
        raise DimensionError(f"rows have {rows.shape[1]} columns, model has d={params.d}")
    if not np.all(np.isfinite(rows)):
        raise MissingDataError("transform needs complete rows")
    mu = params.mu_x if is_target else params.mu_y
    gain, _ = _posterior_operator(params, is_target)
    means = (rows - mu) @ gain.T
    if is_target:
        return means[:, : params.t], means[:, params.t:]
    return None, means


def transform_observed(params, rows, mask, is_target):
    """Posterior latent means using only the observed cells of each row.

    Rows with every cell observed take the fast path of :func:`transform`;
    the others condition on their observed coordinates alone.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if rows.shape != mask.shape or rows.shape[1] != params.d:
        raise DimensionError(f"rows {rows.shape} and mask {mask.shape} must be n x {params.d}")
    if np.any(mask.sum(axis=1) == 0):
        raise MissingDataError("a row has no observed cells")
    A = _loading(params, is_target)
    mu = params.mu_x if is_target else params.mu_y
    means = np.zeros((rows.shape[0], A.shape[1]))
    full = mask.all(axis=1)
    if full.any():
        gain, _ = _posterior_operator(params, is_target)
        means[full] = (rows[full] - mu) @ gain.T
    for i in np.flatnonzero(~full):
        o = mask[i]
        Ao = A[o]
        prec = Ao.T @ Ao + params.sigma2 * np.eye(A.shape[1])
        chol = num_core.cholesky_jitter(prec)
        means[i] = num_core.chol_solve(chol, Ao.T @ (rows[i, o] - mu[o]))
    if is_target:
        return means[:, : params.t], means[:, params.t:]
    return None, means


@dataclass
class SufficientStats:
    """Sums over rows of data and posterior moments, on set-centered data.

    Data are shifted by the per-set sample means ``x_bar``/``y_bar`` before
    accumulation to avoid cancellation; ``u`` is ``(t, z)`` for the target.
    """

    n: int
    m: int
    x_bar: np.ndarray
    y_bar: np.ndarray
    sum_u: np.ndarray
    sum_uu: np.ndarray
    sum_xu: np.ndarray
    sum_xx: float
    sum_z: np.ndarray
    sum_zz: np.ndarray
    sum_yz: np.ndarray
    sum_yy: float

    def __add__(self, other):
        if self.n == 0:
            return other
        n, m = self.n + other.n, self.m + other.m
        return SufficientStats(
            n, m, self.x_bar, self.y_bar,
            self.sum_u + other.sum_u, self.sum_uu + other.sum_uu,
            self.sum_xu + other.sum_xu, self.sum_xx + other.sum_xx,
            self.sum_z + other.sum_z, self.sum_zz + other.sum_zz,
            self.sum_yz + other.sum_yz, self.sum_yy + other.sum_yy,
        )


def _require_complete(pair):
    if pair.has_missing:
        raise MissingDataError(
            "the EM path needs complete data; use the variational path (fit_vi) for missing entries"
        )


def _set_stats(params, rows, center, is_target):
    mu = params.mu_x if is_target else params.mu_y
    xc = rows - center
    gain, cov = _posterior_operator(params, is_target)
    means = (rows - mu) @ gain.T
    count = rows.shape[0]
    return (
        means.sum(axis=0),
        count * cov + means.T @ means,
        xc.T @ means,
        float(np.sum(xc * xc)),
    )


def e_step(params, pair, x_bar=None, y_bar=None):
    """Accumulate the posterior sufficient statistics over both sets."""
    _require_complete(pair)
    x = pair.target
    y = pair.background
    x_bar = x.mean(axis=0) if x_bar is None else x_bar
    y_bar = y.mean(axis=0) if y_bar is None else y_bar
    su, suu, sxu, sxx = _set_stats(params, x, x_bar, True)
    sz, szz, syz, syy = _set_stats(params, y, y_bar, False)
    return SufficientStats(pair.n, pair.m, x_bar, y_bar, su, suu, sxu, sxx, sz, szz, syz, syy)


def m_step(stats, pair, current_params):
    """Jointly maximize the expected complete-data log-likelihood.

    The parameters ``[W, S, mu_x, mu_y]`` act on the augmented latent
    ``(t, z, 1, 0)`` for target rows and ``(0, z, 0, 1)`` for background
    rows, so all of them solve one normal-equation system shared by every
    output dimension. ``sigma2`` is then the mean expected squared residual.
    """
    t, k, d = current_params.t, current_params.k, current_params.d
    q = t + k
    n, m = stats.n, stats.m
    p = q + 2
    G = np.zeros((p, p))
    B = np.zeros((d, p))
    zs = slice(t, q)
    G[:q, :q] += stats.sum_uu
    G[:q, q] = G[q, :q] = stats.sum_u
    G[q, q] = n
    G[zs, zs] += stats.sum_zz
    G[zs, q + 1] = G[q + 1, zs] = stats.sum_z
    G[q + 1, q + 1] = m
    B[:, :q] = stats.sum_xu
    B[:, zs] += stats.sum_yz
    # sums of centered data are zero by construction

    try:
        chol = num_core.cholesky_jitter(G)
    except FactorizationError as exc:
        raise FactorizationError("M-step normal equations are singular") from exc
    theta = num_core.chol_solve(chol, B.T).T
    W = theta[:, :t]
    S = theta[:, zs]
    mu_x = stats.x_bar + theta[:, q]
    mu_y = stats.y_bar + theta[:, q + 1]
    resid = stats.sum_xx + stats.sum_yy - 2.0 * np.sum(theta * B) + np.sum(theta * (theta @ G))
    sigma2 = max(resid / (d * (n + m)), SIGMA2_FLOOR)
    return ClvmParams(S, W, mu_x, mu_y, sigma2)


def _set_loglik(rows, mean, cov):
    chol = num_core.cholesky_jitter(cov)
    resid = rows - mean
    sol = linalg.solve_triangular(chol, resid.T, lower=True, check_finite=False)
    n, d = rows.shape
    return -0.5 * (n * (d * LOG_2PI + num_core.logdet_from_chol(chol)) + float(np.sum(sol * sol)))


def log_likelihood(params, pair):
    """Exact marginal log-likelihood of both sets."""
    _require_complete(pair)
    return _set_loglik(pair.target, params.mu_x, params.target_cov()) + _set_loglik(
        pair.background, params.mu_y, params.background_cov()
    )


def pooled_centered(pair, fill_missing=False):
    """Stack both sets, each centered by its own column means (observed cells)."""
    x, y = pair.target, pair.background
    if fill_missing:
        x_bar = np.nanmean(np.where(pair.target_mask, x, np.nan), axis=0)
        y_bar = np.nanmean(np.where(pair.background_mask, y, np.nan), axis=0)
        x = np.where(pair.target_mask, x, x_bar)
        y = np.where(pair.background_mask, y, y_bar)
    else:
        x_bar, y_bar = x.mean(axis=0), y.mean(axis=0)
    return np.vstack([x - x_bar, y - y_bar]), x_bar, y_bar


def initialize(pair, k, t, seed=0, fill_missing=False):
    """Eigen-initialization of S plus small random W.

    ``S`` takes the top-k eigenvectors of the pooled covariance scaled by
    ``sqrt(lambda - sigma2_0)`` where ``sigma2_0`` is the mean of the
    remaining eigenvalues; ``W`` entries are N(0, 0.01).
    """
    pooled, x_bar, y_bar = pooled_centered(pair, fill_missing=fill_missing)
    d = pair.d
    cov = pooled.T @ pooled / pooled.shape[0]
    lam, vec = num_core.sym_eig(cov)
    tail = lam[k:]
    sigma2 = float(np.mean(tail)) if tail.size else float(lam[-1])
    sigma2 = max(sigma2, 1e-6 * max(float(np.mean(lam)), 1e-12), SIGMA2_FLOOR)
    S = vec[:, :k] * np.sqrt(np.maximum(lam[:k] - sigma2, 0.0))
    rng = RngStream(seed).child("init")
    W = 0.1 * rng.standard_normal((d, t))
    return ClvmParams(S, W, x_bar, y_bar, sigma2)


def _check_dims(pair, k, t):
    if k < 0 or t < 0 or k + t < 1:
        raise DimensionError(f"need k >= 0, t >= 0 and k + t >= 1 (got k={k}, t={t})")
    if k + t >= pair.d:
        raise DimensionError(f"k + t = {k + t} must be below d = {pair.d}")


def fit_em(pair, k, t, max_iter=500, rel_tol=1e-7, seed=0, init=None, callback=None):
    """Fit the Gaussian model by EM.

    Stops when the relative log-likelihood change drops below ``rel_tol``
    or after ``max_iter`` iterations. ``trace[0]`` is the log-likelihood of
    the initialization.
    """
    _require_complete(pair)
    _check_dims(pair, k, t)
    params = init.copy() if init is not None else initialize(pair, k, t, seed)
    if params.k != k or params.t != t:
        raise DimensionError("initial parameters have the wrong latent dimensions")
    x_bar = pair.target.mean(axis=0)
    y_bar = pair.background.mean(axis=0)
    ll = log_likelihood(params, pair)
    trace = [ll]
    if callback is not None:
        callback(0, ll)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        stats = e_step(params, pair, x_bar, y_bar)
        params = m_step(stats, pair, params)
        ll_new = log_likelihood(params, pair)
        trace.append(ll_new)
        if callback is not None:
            callback(it, ll_new)
        if abs(ll_new - ll) <= rel_tol * abs(ll):
            converged = True
            ll = ll_new
            break
        ll = ll_new
    else:
        it = max_iter
    tt, tz = transform(params, pair.target, True)
    _, bz = transform(params, pair.background, False)
    return FittedModel(
        params=params,
        trace=trace,
        converged=converged,
        n_iter=it,
        target_t=tt,
        target_z=tz,
        background_z=bz,
        method="em",
        config={"k": k, "t": t, "max_iter": max_iter, "rel_tol": rel_tol, "seed": seed},
    )
