"""Black-box variational inference for the contrastive model family.

The variational family is mean-field with diagonal Gaussians: one factor
per latent row (``t_i``, ``z_i`` for target rows and ``z_j`` for background
rows), one per missing cell, and, for the Bayesian variants, one per
loading entry and per log-scale. Expected log-likelihoods and priors are
estimated by reparameterized Monte Carlo; KL terms against the
standard-normal latent prior and all Gaussian entropies are closed form.
Gradients are derived by hand and exact per sample.

Variational blocks live in ``VariationalState.blocks`` as ``<name>_mu`` /
``<name>_ls`` pairs (mean, log standard deviation). Point-estimated model
parameters live in a separate ``params`` dict.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import special

from clvm import clvm_em, variants
from clvm.clvm_em import ClvmParams, FittedModel
from clvm.data_model import ContrastivePair
from clvm.errors import ConfigError, DimensionError, DivergenceError
from clvm.num_core import LOG_2PI, as_stream

GAUSS_ENTROPY = 0.5 * (1.0 + LOG_2PI)
LATENT_BLOCKS = ("t", "zx", "zy")
W_PRIORS = ("none", "group", "horseshoe")
S_PRIORS = ("none", "ard")
LIKELIHOODS = ("gaussian", "student_t")
ROBUST_MODES = ("analytic", "variational")


@dataclass
class ModelSpec:
    """Dimensions, likelihood and prior choices, plus their hyperparameters.

    ``likelihood="student_t"`` selects the robust model. In ``analytic``
    mode the noise variance is integrated out, giving a Student-t
    likelihood with point-estimated shape ``a`` and scale ``b``. In
    ``variational`` mode the likelihood stays Gaussian with a shared
    ``sigma2 ~ IG(sigma_a, sigma_b)`` and a Gaussian ``q(ln sigma2)``.
    """

    d: int
    k: int
    t: int
    likelihood: str = "gaussian"
    w_prior: str = "none"
    s_prior: str = "none"
    robust_mode: str = "analytic"
    rho: float = 400.0
    group_sizes: list | None = None
    b_g: float = 1.0
    a0: float = 1e-3
    b0: float = 1e-3
    sigma_a: float = 1.0
    sigma_b: float = 1.0
    prune_delta: float = 1e-3
    prune_p0: float = 0.9

    def __post_init__(self):
        if self.w_prior == "group_penalty":
            self.w_prior = "group"
        for name, allowed in (
            ("likelihood", LIKELIHOODS),
            ("w_prior", W_PRIORS),
            ("s_prior", S_PRIORS),
            ("robust_mode", ROBUST_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.k < 0 or self.t < 0 or self.k + self.t < 1:
            raise ConfigError(f"need k >= 0, t >= 0 and k + t >= 1 (got k={self.k}, t={self.t})")
        if self.k + self.t >= self.d:
            raise ConfigError(f"k + t = {self.k + self.t} must be below d = {self.d}")
        if self.w_prior != "none" and self.t == 0:
            raise ConfigError("a prior on W needs t >= 1")
        if self.s_prior == "ard" and self.k == 0:
            raise ConfigError("ARD on S needs k >= 1")
        if self.rho < 0:
            raise ConfigError("rho must be non-negative")
        for name in ("b_g", "a0", "b0", "sigma_a", "sigma_b", "prune_delta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.prune_p0 < 1:
            raise ConfigError("prune_p0 must lie in (0, 1)")

    @property
    def noise_variational(self):
        return self.likelihood == "student_t" and self.robust_mode == "variational"

    @property
    def student_t(self):
        return self.likelihood == "student_t" and self.robust_mode == "analytic"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model spec keys: {unknown}")
        return cls(**data)


@dataclass
class VariationalState:
    """Variational parameters keyed by block name (``<name>_mu`` / ``<name>_ls``)."""

    blocks: dict
    n: int
    m: int
    x_missing: tuple = ((), ())
    y_missing: tuple = ((), ())

    def __post_init__(self):
        self.x_missing = tuple(np.asarray(a, dtype=np.intp) for a in self.x_missing)
        self.y_missing = tuple(np.asarray(a, dtype=np.intp) for a in self.y_missing)
        for name in ("t", "zx"):
            if self.blocks[name + "_mu"].shape[0] != self.n:
                raise DimensionError(f"block {name} must have {self.n} rows")
        if self.blocks["zy_mu"].shape[0] != self.m:
            raise DimensionError(f"block zy must have {self.m} rows")
        for key, val in self.blocks.items():
            if key.endswith("_ls") and not np.all(np.isfinite(val)):
                raise DivergenceError(f"log-std block {key} has non-finite entries")

    def names(self):
        return [k[:-3] for k in self.blocks if k.endswith("_mu")]

    def mean(self, name):
        return self.blocks[name + "_mu"]

    def std(self, name):
        return np.exp(self.blocks[name + "_ls"])

    def copy(self):
        return VariationalState(
            {k: v.copy() for k, v in self.blocks.items()}, self.n, self.m, self.x_missing, self.y_missing
        )


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(adam, grads, values, maximize=True):
    """One bias-corrected ADAM update of ``values`` (dict of arrays) in place."""
    adam.step += 1
    c1 = 1.0 - adam.beta1**adam.step
    c2 = 1.0 - adam.beta2**adam.step
    sign = 1.0 if maximize else -1.0
    for key, g in grads.items():
        if key not in adam.m:
            adam.m[key] = np.zeros_like(g)
            adam.v[key] = np.zeros_like(g)
        if adam.m[key].shape != np.shape(g) or np.shape(values[key]) != np.shape(g):
            raise DimensionError(f"gradient for {key} has shape {np.shape(g)}, expected {adam.m[key].shape}")
        adam.m[key] = adam.beta1 * adam.m[key] + (1 - adam.beta1) * g
        adam.v[key] = adam.beta2 * adam.v[key] + (1 - adam.beta2) * g * g
        values[key] = values[key] + sign * adam.lr * (adam.m[key] / c1) / (np.sqrt(adam.v[key] / c2) + adam.eps)
    return adam, values


# ------------------------------------------------------------------ KL


def kl_standard_normal(mean, log_std):
    """``sum KL(N(mean, s^2) || N(0, 1))`` with ``s = exp(log_std)``."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(0.5 * np.sum(mean**2 + np.exp(2 * log_std) - 1.0 - 2.0 * log_std))


def kl_standard_normal_grad(mean, log_std):
    """Gradients of :func:`kl_standard_normal` in ``mean`` and ``log_std``."""
    return np.asarray(mean, dtype=np.float64).copy(), np.exp(2 * np.asarray(log_std, dtype=np.float64)) - 1.0


# ---------------------------------------------------------- data layout


@dataclass
class _Data:
    x: np.ndarray
    y: np.ndarray
    x_missing: tuple
    y_missing: tuple


def _prepare(pair):
    x = np.where(pair.target_mask, pair.target, 0.0)
    y = np.where(pair.background_mask, pair.background, 0.0)
    return _Data(x, y, np.nonzero(~pair.target_mask), np.nonzero(~pair.background_mask))


def _variational_names(spec, state):
    names = list(LATENT_BLOCKS)
    if state.x_missing[0].size:
        names.append("xm")
    if state.y_missing[0].size:
        names.append("ym")
    if spec.w_prior == "horseshoe":
        names += ["W", "lrho", "ltau", "llr", "llt"]
    if spec.s_prior == "ard":
        names += ["S", "lalpha"]
    if spec.noise_variational:
        names.append("ls2")
    return names


def draw_noise(spec, state, rng):
    """Standard-normal draws for every variational block, in a fixed order."""
    return {name: rng.standard_normal(state.blocks[name + "_mu"].shape) for name in _variational_names(spec, state)}


# ------------------------------------------------------------ objective


def _objective(spec, state, params, data, eps, loglik_weight=1.0):
    """Single-sample ELBO and its exact gradients for noise draw ``eps``."""
    blocks = state.blocks
    names = _variational_names(spec, state)
    draw, scale = {}, {}
    for name in names:
        scale[name] = np.exp(blocks[name + "_ls"])
        draw[name] = blocks[name + "_mu"] + scale[name] * eps[name]
    g_draw = {name: np.zeros_like(draw[name]) for name in names}
    g_lam = {key: np.zeros_like(val) for key, val in blocks.items()}
    g_th = {key: np.zeros_like(val) for key, val in params.items()}

    W = draw["W"] if spec.w_prior == "horseshoe" else params["W"]
    S = draw["S"] if spec.s_prior == "ard" else params["S"]
    T, Zx, Zy = draw["t"], draw["zx"], draw["zy"]
    X, Y = data.x, data.y
    if "xm" in draw:
        X = X.copy()
        X[data.x_missing] = draw["xm"]
    if "ym" in draw:
        Y = Y.copy()
        Y[data.y_missing] = draw["ym"]
    Rx = X - T @ W.T - Zx @ S.T - params["mu_x"]
    Ry = Y - Zy @ S.T - params["mu_y"]
    count = Rx.size + Ry.size

    # likelihood
    if spec.student_t:
        a, b = _positive(params, "log_a"), _positive(params, "log_b")
        lx, ly = np.log1p(Rx * Rx / (2 * b)), np.log1p(Ry * Ry / (2 * b))
        const = special.gammaln(a + 0.5) - special.gammaln(a) - 0.5 * math.log(2 * math.pi * b)
        log_sum = lx.sum() + ly.sum()
        ll = count * const - (a + 0.5) * log_sum
        Gx = -(2 * a + 1) * Rx / (2 * b + Rx * Rx)
        Gy = -(2 * a + 1) * Ry / (2 * b + Ry * Ry)
        q = np.sum(Rx * Rx / (2 * b + Rx * Rx)) + np.sum(Ry * Ry / (2 * b + Ry * Ry))
        g_th["log_a"][0] += loglik_weight * a * (count * (special.digamma(a + 0.5) - special.digamma(a)) - log_sum)
        g_th["log_b"][0] += loglik_weight * (-0.5 * count + (a + 0.5) * q)
    else:
        if spec.noise_variational:
            ls2 = draw["ls2"][0]
            s2 = _positive(draw, "ls2", "q(ln sigma2) draw")
        else:
            ls2 = params["log_s2"][0]
            s2 = _positive(params, "log_s2")
        sq = np.sum(Rx * Rx) + np.sum(Ry * Ry)
        ll = -0.5 * count * (LOG_2PI + ls2) - sq / (2 * s2)
        Gx, Gy = -Rx / s2, -Ry / s2
        g_ls2 = loglik_weight * (-0.5 * count + sq / (2 * s2))
        if spec.noise_variational:
            g_draw["ls2"][0] += g_ls2
        else:
            g_th["log_s2"][0] += g_ls2
    if not np.isfinite(ll):
        _raise_row_diagnostic(Rx, Ry)
    value = loglik_weight * ll
    Gx, Gy = loglik_weight * Gx, loglik_weight * Gy

    # back through the linear predictor
    g_W = -Gx.T @ T
    g_S = -Gx.T @ Zx - Gy.T @ Zy
    g_draw["t"] += -Gx @ W
    g_draw["zx"] += -Gx @ S
    g_draw["zy"] += -Gy @ S
    g_th["mu_x"] += -Gx.sum(axis=0)
    g_th["mu_y"] += -Gy.sum(axis=0)
    if "xm" in draw:
        g_draw["xm"] += Gx[data.x_missing]
    if "ym" in draw:
        g_draw["ym"] += Gy[data.y_missing]

    # W prior
    if spec.w_prior == "group":
        value -= variants.group_penalty(W, spec.rho, spec.group_sizes)
        g_W -= variants.group_penalty_gradient(W, spec.rho, spec.group_sizes)
    elif spec.w_prior == "horseshoe":
        value += _horseshoe_terms(spec, W, draw, g_draw, g_W)
    if spec.w_prior == "horseshoe":
        g_draw["W"] += g_W
    else:
        g_th["W"] += g_W

    # S prior
    if spec.s_prior == "ard":
        la = draw["lalpha"]
        alpha = np.exp(la)
        power = np.sum(S * S, axis=0)
        value += float(np.sum(-0.5 * spec.d * (LOG_2PI + la) - power / (2 * alpha)))
        g_S -= S / alpha
        g_draw["lalpha"] += -0.5 * spec.d + power / (2 * alpha)
        value += float(np.sum(variants.log_ig_logspace(la, spec.a0, math.log(spec.b0))))
        g_draw["lalpha"] += variants.log_ig_logspace_grads(la, spec.a0, math.log(spec.b0))[0]
        g_draw["S"] += g_S
    else:
        g_th["S"] += g_S

    if spec.noise_variational:
        u = draw["ls2"]
        value += float(np.sum(variants.log_ig_logspace(u, spec.sigma_a, math.log(spec.sigma_b))))
        g_draw["ls2"] += variants.log_ig_logspace_grads(u, spec.sigma_a, math.log(spec.sigma_b))[0]

    # closed-form KL for latent rows, closed-form entropy for everything else
    for name in names:
        mu_key, ls_key = name + "_mu", name + "_ls"
        if name in LATENT_BLOCKS:
            value -= kl_standard_normal(blocks[mu_key], blocks[ls_key])
            gm, gs = kl_standard_normal_grad(blocks[mu_key], blocks[ls_key])
            g_lam[mu_key] -= gm
            g_lam[ls_key] -= gs
        else:
            value += float(np.sum(blocks[ls_key])) + GAUSS_ENTROPY * blocks[ls_key].size
            g_lam[ls_key] += 1.0
        g_lam[mu_key] += g_draw[name]
        g_lam[ls_key] += g_draw[name] * eps[name] * scale[name]
    return float(value), g_lam, g_th


def _positive(store, key, label=None):
    with np.errstate(over="ignore", under="ignore"):
        val = float(np.exp(store[key][0]))
    if not (np.isfinite(val) and val > 0):
        raise DivergenceError(f"parameter block {label or key} left the representable range")
    return val


def _horseshoe_terms(spec, W, draw, g_draw, g_W):
    """Log joint of W and horseshoe scales in log space; accumulates gradients."""
    lrho, ltau, llr, llt = draw["lrho"], draw["ltau"][0], draw["llr"], draw["llt"][0]
    t = W.shape[1]
    v = lrho + ltau
    var = np.exp(v)
    power = np.sum(W * W, axis=1)
    value = float(np.sum(-0.5 * t * (LOG_2PI + v) - power / (2 * var)))
    g_W -= W / var[:, None]
    g_v = -0.5 * t + power / (2 * var)
    g_draw["lrho"] += g_v
    g_draw["ltau"][0] += g_v.sum()

    # rho_i^2 | lam_i ~ IG(1/2, 1/lam_i), lam_i ~ IG(1/2, 1)
    value += float(np.sum(variants.log_ig_logspace(lrho, 0.5, -llr)))
    gu, gb = variants.log_ig_logspace_grads(lrho, 0.5, -llr)
    g_draw["lrho"] += gu
    g_draw["llr"] -= gb
    value += float(np.sum(variants.log_ig_logspace(llr, 0.5, 0.0)))
    g_draw["llr"] += variants.log_ig_logspace_grads(llr, 0.5, 0.0)[0]

    # tau^2 | lam_tau ~ IG(1/2, 1/lam_tau), lam_tau ~ IG(1/2, 1/b_g^2)
    value += float(variants.log_ig_logspace(ltau, 0.5, -llt))
    gu, gb = variants.log_ig_logspace_grads(ltau, 0.5, -llt)
    g_draw["ltau"][0] += gu
    g_draw["llt"][0] -= gb
    lb = -2.0 * math.log(spec.b_g)
    value += float(variants.log_ig_logspace(llt, 0.5, lb))
    g_draw["llt"][0] += variants.log_ig_logspace_grads(llt, 0.5, lb)[0]
    return value


def _raise_row_diagnostic(Rx, Ry):
    bad = np.nonzero(~np.all(np.isfinite(Rx), axis=1))[0]
    if bad.size:
        raise DivergenceError(f"non-finite ELBO contribution in target row {int(bad[0])}")
    bad = np.nonzero(~np.all(np.isfinite(Ry), axis=1))[0]
    if bad.size:
        raise DivergenceError(f"non-finite ELBO contribution in background row {int(bad[0])}")
    raise DivergenceError("non-finite ELBO from noise or likelihood parameters")


# ------------------------------------------------------- public estimators


def _check(spec, state, params, pair, n_mc):
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if pair.d != spec.d:
        raise DimensionError(f"model spec has d={spec.d} but data has d={pair.d}")
    if state.n != pair.n or state.m != pair.m:
        raise DimensionError("variational state does not match the number of rows")


def elbo_samples(spec, state, params, pair, n_mc, rng, loglik_weight=1.0):
    """``n_mc`` independent single-sample ELBO estimates."""
    _check(spec, state, params, pair, n_mc)
    rng = as_stream(rng)
    data = _prepare(pair)
    return np.array(
        [_objective(spec, state, params, data, draw_noise(spec, state, rng), loglik_weight)[0] for _ in range(n_mc)]
    )


def elbo_estimate(spec, state, params, pair, n_mc=64, rng=0, loglik_weight=1.0):
    """Unbiased Monte Carlo ELBO estimate averaged over ``n_mc`` draws."""
    return float(np.mean(elbo_samples(spec, state, params, pair, n_mc, rng, loglik_weight)))


def elbo_gradient(spec, state, params, pair, n_mc=1, rng=0, loglik_weight=1.0, data=None):
    """Pathwise gradients averaged over ``n_mc`` draws.

    Returns ``(value, grad_state, grad_params)``; gradients are dicts keyed
    like ``state.blocks`` and ``params``.
    """
    _check(spec, state, params, pair, n_mc)
    rng = as_stream(rng)
    data = _prepare(pair) if data is None else data
    total = 0.0
    g_lam = g_th = None
    for _ in range(n_mc):
        val, gl, gt = _objective(spec, state, params, data, draw_noise(spec, state, rng), loglik_weight)
        total += val
        if g_lam is None:
            g_lam, g_th = gl, gt
        else:
            for key in g_lam:
                g_lam[key] += gl[key]
            for key in g_th:
                g_th[key] += gt[key]
    for grads in (g_lam, g_th):
        for key, g in grads.items():
            g /= n_mc
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter block {key}")
    return total / n_mc, g_lam, g_th


# ------------------------------------------------------------- fitting


def init_state(spec, pair, seed=0, em_iters=500):
    """Initialize ``(state, params)`` from a short EM run and its exact posterior.

    EM runs on the mean-filled data. Starting mean-field VI directly from a
    small random W sits next to the W = 0, q(t) = prior stationary point,
    which ADAM leaves only very slowly.
    """
    if pair.d != spec.d:
        raise DimensionError(f"model spec has d={spec.d} but data has d={pair.d}")
    if spec.k + spec.t >= pair.d:
        raise DimensionError(f"k + t must be below d = {pair.d}")
    base = clvm_em.initialize(pair, spec.k, spec.t, seed=seed, fill_missing=True)
    pooled, x_bar, y_bar = clvm_em.pooled_centered(pair, fill_missing=True)
    if em_iters > 0:
        filled = ContrastivePair(pooled[: pair.n] + x_bar, pooled[pair.n:] + y_bar)
        base = clvm_em.fit_em(filled, spec.k, spec.t, max_iter=em_iters, init=base).params
    xc, yc = pooled[: pair.n], pooled[pair.n:]
    t = spec.t
    blocks = {}
    gain, cov = clvm_em._posterior_operator(base, True)
    mean = xc @ gain.T
    ls = 0.5 * np.log(np.diag(cov))
    blocks["t_mu"], blocks["t_ls"] = mean[:, :t].copy(), np.tile(ls[:t], (pair.n, 1))
    blocks["zx_mu"], blocks["zx_ls"] = mean[:, t:].copy(), np.tile(ls[t:], (pair.n, 1))
    gain, cov = clvm_em._posterior_operator(base, False)
    blocks["zy_mu"] = yc @ gain.T
    blocks["zy_ls"] = np.tile(0.5 * np.log(np.diag(cov)), (pair.m, 1))

    x_missing = np.nonzero(~pair.target_mask)
    y_missing = np.nonzero(~pair.background_mask)
    half_log_s2 = 0.5 * math.log(base.sigma2)
    if x_missing[0].size:
        fit_x = blocks["t_mu"] @ base.W.T + blocks["zx_mu"] @ base.S.T + base.mu_x
        blocks["xm_mu"] = fit_x[x_missing]
        blocks["xm_ls"] = np.full(x_missing[0].size, half_log_s2)
    if y_missing[0].size:
        fit_y = blocks["zy_mu"] @ base.S.T + base.mu_y
        blocks["ym_mu"] = fit_y[y_missing]
        blocks["ym_ls"] = np.full(y_missing[0].size, half_log_s2)

    params = {"mu_x": base.mu_x.copy(), "mu_y": base.mu_y.copy()}
    loading_ls = 0.5 * math.log(base.sigma2 / (pair.n + pair.m))
    if spec.w_prior == "horseshoe":
        blocks["W_mu"], blocks["W_ls"] = base.W.copy(), np.full(base.W.shape, loading_ls)
        blocks["lrho_mu"], blocks["lrho_ls"] = np.zeros(spec.d), np.full(spec.d, math.log(0.1))
        blocks["ltau_mu"], blocks["ltau_ls"] = np.zeros(1), np.full(1, math.log(0.1))
        blocks["llr_mu"], blocks["llr_ls"] = np.zeros(spec.d), np.full(spec.d, math.log(0.1))
        blocks["llt_mu"], blocks["llt_ls"] = np.zeros(1), np.full(1, math.log(0.1))
    else:
        params["W"] = base.W.copy()
    if spec.s_prior == "ard":
        blocks["S_mu"], blocks["S_ls"] = base.S.copy(), np.full(base.S.shape, loading_ls)
        power = np.sum(base.S**2, axis=0) / spec.d
        blocks["lalpha_mu"] = np.log(np.maximum(power, 1e-3))
        blocks["lalpha_ls"] = np.full(spec.k, math.log(0.1))
    else:
        params["S"] = base.S.copy()
    if spec.student_t:
        params["log_a"] = np.array([math.log(2.0)])
        params["log_b"] = np.array([math.log(2.0 * base.sigma2)])
    elif spec.noise_variational:
        blocks["ls2_mu"], blocks["ls2_ls"] = np.array([math.log(base.sigma2)]), np.array([math.log(0.1)])
    else:
        params["log_s2"] = np.array([math.log(base.sigma2)])
    return VariationalState(blocks, pair.n, pair.m, x_missing, y_missing), params


def point_params(spec, state, params):
    """Collapse variational and point blocks into :class:`ClvmParams` (means of q)."""
    W = state.mean("W") if spec.w_prior == "horseshoe" else params["W"]
    S = state.mean("S") if spec.s_prior == "ard" else params["S"]
    if spec.student_t:
        # variance of the fitted Student-t when it exists, else its squared scale
        a, b = _positive(params, "log_a"), _positive(params, "log_b")
        sigma2 = b / (a - 1) if a > 1 else b / a
    elif spec.noise_variational:
        sigma2 = math.exp(state.mean("ls2")[0])
    else:
        sigma2 = math.exp(params["log_s2"][0])
    return ClvmParams(S.copy(), W.copy(), params["mu_x"].copy(), params["mu_y"].copy(), sigma2)


def horseshoe_state(spec, state):
    if spec.w_prior != "horseshoe":
        return None
    b = state.blocks
    return variants.HorseshoeState(
        b["lrho_mu"], b["lrho_ls"], float(b["ltau_mu"][0]), float(b["ltau_ls"][0]),
        b["llr_mu"], b["llr_ls"], float(b["llt_mu"][0]), float(b["llt_ls"][0]), spec.b_g,
    )


def impute_missing(state, pair):
    """Target matrix with missing cells replaced by their variational means."""
    out = np.array(pair.target, dtype=np.float64, copy=True)
    if state.x_missing[0].size:
        out[state.x_missing] = state.mean("xm")
    return out


def _grad_norm(*grads):
    return math.sqrt(sum(float(np.sum(g * g)) for gd in grads for g in gd.values()))


def fit_vi(
    spec,
    pair,
    iters=5000,
    n_mc=1,
    lr=1e-2,
    seed=0,
    eval_every=0,
    eval_mc=64,
    tol=1e-5,
    window=100,
    plateau=500,
    init=None,
    callback=None,
    timing=False,
):
    """Maximize the ELBO with ADAM on reparameterized gradients.

    Returns ``(FittedModel, VariationalState)``. The trace holds one record
    per iteration with the ``window``-iteration moving average of the
    single-draw ELBO; ``wall_ms`` is filled only when ``timing`` is set so
    that traces are reproducible byte for byte.
    """
    if iters < 0:
        raise ValueError("iters must be non-negative")
    state, params = init if init is not None else init_state(spec, pair, seed)
    state, params = state.copy(), {k: v.copy() for k, v in params.items()}
    stream = as_stream(seed)
    mc_rng = stream.child("mc")
    data = _prepare(pair)
    adam_lam, adam_th = AdamState(lr=lr), AdamState(lr=lr)
    raw, trace = [], []
    best, since_best = -math.inf, 0
    converged = False
    start = time.perf_counter()
    it = 0
    for it in range(1, iters + 1):
        try:
            val, g_lam, g_th = elbo_gradient(spec, state, params, pair, n_mc, mc_rng, data=data)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}") from exc
        if not math.isfinite(val):
            raise DivergenceError(f"ELBO became non-finite at iteration {it}")
        adam_step(adam_lam, g_lam, state.blocks)
        adam_step(adam_th, g_th, params)
        raw.append(val)
        smooth = float(np.mean(raw[-window:]))
        record = {
            "iter": it,
            "elbo": smooth,
            "grad_norm": _grad_norm(g_lam, g_th),
            "wall_ms": round(1000 * (time.perf_counter() - start), 3) if timing else None,
        }
        if eval_every and it % eval_every == 0:
            record["elbo_eval"] = elbo_estimate(spec, state, params, pair, eval_mc, stream.child(f"eval{it}"))
        trace.append(record)
        if callback is not None:
            callback(record)
        if smooth > best:
            best, since_best = smooth, 0
        else:
            since_best += 1
            if since_best >= plateau:
                adam_lam.lr *= 0.5
                adam_th.lr *= 0.5
                since_best = 0
        if it >= 2 * window:
            prev = float(np.mean(raw[-2 * window: -window]))
            if abs(smooth - prev) < tol * abs(prev):
                converged = True
                break
    state = VariationalState(state.blocks, state.n, state.m, state.x_missing, state.y_missing)
    point = point_params(spec, state, params)
    extras = {"spec": spec, "state": state, "raw_params": params, "elbo_raw": raw}
    if spec.w_prior == "horseshoe":
        hs = horseshoe_state(spec, state)
        mean, std = hs.log_scale_moments()
        pruned = variants.prune_rows(mean, std, spec.prune_delta, spec.prune_p0)
        point.W[pruned] = 0.0
        extras["pruned_rows"] = pruned
    extras["final_elbo"] = elbo_estimate(spec, state, params, pair, eval_mc, stream.child("final"))
    fitted = FittedModel(
        params=point,
        trace=trace,
        converged=converged,
        n_iter=it,
        target_t=state.mean("t").copy(),
        target_z=state.mean("zx").copy(),
        background_z=state.mean("zy").copy(),
        method="vi",
        config={"iters": iters, "n_mc": n_mc, "lr": lr, "seed": seed, **spec.to_dict()},
        extras=extras,
    )
    return fitted, state
