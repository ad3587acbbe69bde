"""Sparse, ARD and robust model variants.

Log-densities and penalties used by :mod:`clvm.vi_engine`, plus the
post-fit summaries (row pruning, effective shared rank). Positive scale
variables are handled on the log scale; ``log_ig_logspace`` is the density
of ``u = ln v`` for ``v ~ IG(a, b)`` and already includes the Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from clvm.errors import DimensionError

NORM_SMOOTH = 1e-12
LOG_PI = math.log(math.pi)


# ----------------------------------------------------------- hyper/state


@dataclass
class HorseshoeState:
    """Variational parameters of the horseshoe prior on rows of W.

    Every positive scale ``v`` is represented by a Gaussian ``q(ln v)`` with
    mean ``*_mu`` and log standard deviation ``*_ls``. ``lam_*`` are the
    auxiliary inverse-gamma mixing variables of the half-Cauchy scales.
    """

    rho2_mu: np.ndarray
    rho2_ls: np.ndarray
    tau2_mu: float
    tau2_ls: float
    lam_rho_mu: np.ndarray
    lam_rho_ls: np.ndarray
    lam_tau_mu: float
    lam_tau_ls: float
    b_g: float = 1.0

    def __post_init__(self):
        if not self.b_g > 0:
            raise ValueError("b_g must be positive")

    def log_scale_moments(self):
        """Mean and std of ``ln(rho_i^2 tau^2)`` under q, per row."""
        mean = np.asarray(self.rho2_mu) + self.tau2_mu
        std = np.sqrt(np.exp(2 * np.asarray(self.rho2_ls)) + math.exp(2 * self.tau2_ls))
        return mean, std


@dataclass
class ArdState:
    """Variational ``q(ln alpha_j)`` per column of S, with IG(a0, b0) prior."""

    alpha_mu: np.ndarray
    alpha_ls: np.ndarray
    a0: float = 1e-3
    b0: float = 1e-3

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0):
            raise ValueError("a0 and b0 must be positive")


@dataclass
class RobustState:
    """IG(a, b) hyperparameters of the noise variance and ``q(ln sigma2)``."""

    a: float = 1.0
    b: float = 1.0
    sigma2_mu: float = 0.0
    sigma2_ls: float = -2.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")


# ------------------------------------------------------ group penalty


def _row_groups(d, groups):
    if groups is None:
        return [np.array([i]) for i in range(d)]
    groups = [np.asarray(g, dtype=int).ravel() for g in groups]
    flat = np.concatenate(groups) if groups else np.zeros(0, dtype=int)
    if flat.size != d or np.unique(flat).size != d or flat.min() < 0 or flat.max() >= d:
        raise DimensionError("groups must partition the rows of W")
    return groups


def _group_weights(W, groups, group_sizes):
    if group_sizes is None:
        return np.array([math.sqrt(g.size * W.shape[1]) for g in groups])
    sizes = np.asarray(group_sizes, dtype=np.float64).ravel()
    if sizes.size != len(groups):
        raise DimensionError("one group size is needed per group")
    return np.sqrt(sizes)


def group_penalty(W, rho, group_sizes=None, groups=None):
    """``rho * sum_g sqrt(p_g) * ||W_g||_2`` over row groups of W.

    By default each row is its own group and ``p_g`` is the number of
    entries in the group (t for single rows).
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    groups = _row_groups(W.shape[0], groups)
    weights = _group_weights(W, groups, group_sizes)
    norms = np.array([np.linalg.norm(W[g]) for g in groups])
    return float(rho * np.sum(weights * norms))


def group_penalty_gradient(W, rho, group_sizes=None, groups=None):
    """Gradient of :func:`group_penalty` using the smoothed norm ``sqrt(||w||^2 + 1e-12)``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    groups = _row_groups(W.shape[0], groups)
    weights = _group_weights(W, groups, group_sizes)
    grad = np.zeros_like(W)
    for g, w in zip(groups, weights):
        norm = math.sqrt(float(np.sum(W[g] ** 2)) + NORM_SMOOTH)
        grad[g] = rho * w * W[g] / norm
    return grad


def row_norms(W):
    return np.linalg.norm(np.atleast_2d(W), axis=1)


# ------------------------------------------------- scale distributions


def half_cauchy_logpdf(a, b):
    """Log density of C+(0, b): ``2 / (pi b (1 + a^2 / b^2))`` for a > 0."""
    a = np.asarray(a, dtype=np.float64)
    out = math.log(2.0) - LOG_PI - math.log(b) - np.log1p((a / b) ** 2)
    return np.where(a > 0, out, -np.inf)


def inv_gamma_logpdf(x, a, b):
    """Log density of IG(a, b) with shape ``a`` and scale ``b``."""
    x = np.asarray(x, dtype=np.float64)
    return a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(x) - b / x


def log_ig_logspace(u, a, log_b):
    """Log density of ``u = ln v`` when ``v ~ IG(a, exp(log_b))``."""
    return a * log_b - special.gammaln(a) - a * u - np.exp(log_b - u)


def log_ig_logspace_grads(u, a, log_b):
    """Partial derivatives of :func:`log_ig_logspace` in ``u`` and ``log_b``."""
    e = np.exp(log_b - u)
    return -a + e, a - e


def horseshoe_log_joint(W, rho2, tau2, lam_rho, lam_tau, b_g=1.0):
    """Log joint of W and the horseshoe scales in the auxiliary IG form.

    ``W_i | rho_i, tau ~ N(0, rho_i^2 tau^2 I)``,
    ``rho_i^2 | lam_i ~ IG(1/2, 1/lam_i)``, ``lam_i ~ IG(1/2, 1)``,
    ``tau^2 | lam_tau ~ IG(1/2, 1/lam_tau)``, ``lam_tau ~ IG(1/2, 1/b_g^2)``.
    Densities are with respect to the scale variables themselves.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    rho2 = np.asarray(rho2, dtype=np.float64).ravel()
    lam_rho = np.asarray(lam_rho, dtype=np.float64).ravel()
    if np.any(rho2 <= 0) or tau2 <= 0 or np.any(lam_rho <= 0) or lam_tau <= 0:
        raise ValueError("sampled horseshoe scales must be positive")
    if rho2.size != W.shape[0] or lam_rho.size != W.shape[0]:
        raise DimensionError("one local scale per row of W is needed")
    t = W.shape[1]
    var = rho2 * tau2
    lp_w = np.sum(-0.5 * t * np.log(2 * np.pi * var) - np.sum(W**2, axis=1) / (2 * var))
    lp_rho = np.sum(inv_gamma_logpdf(rho2, 0.5, 1.0 / lam_rho)) + np.sum(inv_gamma_logpdf(lam_rho, 0.5, 1.0))
    lp_tau = inv_gamma_logpdf(tau2, 0.5, 1.0 / lam_tau) + inv_gamma_logpdf(lam_tau, 0.5, 1.0 / b_g**2)
    return float(lp_w + lp_rho + lp_tau)


def horseshoe_direct_log_joint(W, rho, tau, b_g=1.0):
    """Log joint of W, rho and tau with half-Cauchy densities on rho and tau."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    rho = np.asarray(rho, dtype=np.float64).ravel()
    t = W.shape[1]
    var = (rho * tau) ** 2
    lp_w = np.sum(-0.5 * t * np.log(2 * np.pi * var) - np.sum(W**2, axis=1) / (2 * var))
    return float(lp_w + np.sum(half_cauchy_logpdf(rho, 1.0)) + half_cauchy_logpdf(tau, b_g))


def prune_probability(mean_log_scale, std_log_scale, delta=1e-3):
    """``q(rho_i^2 tau^2 < delta)`` for a log-normal q, per row."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    mean = np.asarray(mean_log_scale, dtype=np.float64)
    std = np.maximum(np.asarray(std_log_scale, dtype=np.float64), 1e-300)
    return stats.norm.cdf((math.log(delta) - mean) / std)


def prune_rows(mean_log_scale, std_log_scale, delta=1e-3, p0=0.9):
    """Rows whose scale ``rho_i^2 tau^2`` is below ``delta`` with probability above ``p0``.

    The scale is log-normal under q, so the probability is a normal CDF of
    ``(ln delta - mean) / std``. Returns a boolean mask, True = pruned.
    """
    if not 0 < p0 < 1:
        raise ValueError("p0 must lie in (0, 1)")
    return prune_probability(mean_log_scale, std_log_scale, delta) > p0


# ----------------------------------------------------------------- ARD


def ard_log_prior(S, alpha, a0=1e-3, b0=1e-3):
    """``sum_j log N(S_:j | 0, alpha_j I) + log IG(alpha_j | a0, b0)``."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    if alpha.size != S.shape[1]:
        raise DimensionError("one alpha per column of S is needed")
    d = S.shape[0]
    lp = -0.5 * d * np.log(2 * np.pi * alpha) - np.sum(S**2, axis=0) / (2 * alpha)
    return float(np.sum(lp + inv_gamma_logpdf(alpha, a0, b0)))


def variance_shares(S):
    """Fraction of ``sum_j ||S_:j||^2`` carried by each column, sorted descending."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    power = np.sum(S**2, axis=0)
    total = power.sum()
    if total <= 0:
        return np.zeros_like(power)
    return np.sort(power / total)[::-1]


def effective_shared_rank(fitted_or_S, variance_threshold=0.01):
    """Number of columns of S whose variance share exceeds ``variance_threshold``."""
    S = getattr(getattr(fitted_or_S, "params", None), "S", fitted_or_S)
    shares = variance_shares(S)
    if variance_threshold <= 0:
        return int(shares.size)
    return int(np.sum(shares > variance_threshold))


# ------------------------------------------------------------ Student-t


def student_t_loglik(x_row, mean_row, nu, lam):
    """Sum over dimensions of ``log St(x | mean, nu, lam)`` (``lam`` is the precision)."""
    if nu <= 0 or lam <= 0:
        raise ValueError("nu and lambda must be positive")
    r = np.asarray(x_row, dtype=np.float64) - np.asarray(mean_row, dtype=np.float64)
    per = (
        special.gammaln((nu + 1) / 2)
        - special.gammaln(nu / 2)
        + 0.5 * math.log(lam / (math.pi * nu))
        - 0.5 * (nu + 1) * np.log1p(lam * r * r / nu)
    )
    return float(np.sum(per))


def student_t_from_ig(a, b):
    """``(nu, lambda)`` of the Student-t obtained by mixing N(mu, s) over s ~ IG(a, b)."""
    return 2.0 * a, a / b
