"""Contrastive variational autoencoder with hand-written reverse mode.

Target rows decode as ``f_s(z) + f_t(t) + mu_x`` and background rows as
``f_s(z) + mu_y``. Both sets have amortized Gaussian encoders; the target
encoder emits ``(z, t)`` jointly. Gradients flow through
:func:`mlp_backward`, which is checked against finite differences in the
test-suite. A plain VAE is the special case ``t = 0`` without background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from clvm.errors import DimensionError, DivergenceError
from clvm.num_core import LOG_2PI, as_stream
from clvm.vi_engine import AdamState, adam_step

LOGSTD_MIN, LOGSTD_MAX = -6.0, 3.0
DECODER_HIDDEN = (128, 256)
ENCODER_HIDDEN = (256, 128)


# ----------------------------------------------------------------- MLP


@dataclass
class MlpParams:
    """Weights ``W[l]`` (fan_in x fan_out) and biases; ReLU between layers, linear output."""

    weights: list
    biases: list
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input {w.shape[0]} does not chain from {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, sizes, rng):
        """Glorot-uniform weights, zero biases."""
        rng = as_stream(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def load(self, prefix, values):
        for i in range(len(self.weights)):
            self.weights[i] = values[f"{prefix}.W{i}"]
            self.biases[i] = values[f"{prefix}.b{i}"]
        self.version += 1


@dataclass
class MlpCache:
    inputs: np.ndarray
    pre: list
    owner: int
    version: int


def mlp_forward(params, inputs):
    """Forward pass on a row or a batch of rows. Returns ``(output, cache)``."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(f"input has {x.shape[1]} columns, network expects {params.weights[0].shape[0]}")
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    cache = MlpCache(x, pre, id(params), params.version)
    return (h[0] if single else h), cache


def mlp_backward(params, cache, output_gradient):
    """Reverse-mode pass. Returns ``(weight_grads, bias_grads, input_grad)``."""
    if cache.owner != id(params) or cache.version != params.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = np.atleast_2d(np.asarray(output_gradient, dtype=np.float64))
    if g.shape != cache.pre[-1].shape:
        raise DimensionError(f"output gradient shape {g.shape} does not match {cache.pre[-1].shape}")
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        h_in = cache.inputs if i == 0 else np.maximum(cache.pre[i - 1], 0.0)
        gw[i] = h_in.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (cache.pre[i - 1] > 0)
    if np.ndim(output_gradient) == 1:
        g = g[0]
    return gw, gb, g


# --------------------------------------------------------------- model


@dataclass
class CvaeModel:
    dec_s: MlpParams
    dec_t: MlpParams | None
    enc_t: MlpParams
    enc_s: MlpParams | None
    mu_x: np.ndarray
    mu_y: np.ndarray
    log_s2: float = 0.0

    @property
    def k(self):
        return self.dec_s.sizes[0]

    @property
    def t(self):
        return 0 if self.dec_t is None else self.dec_t.sizes[0]

    @property
    def d(self):
        return self.mu_x.size

    def arrays(self):
        out = {"mu_x": self.mu_x, "mu_y": self.mu_y, "log_s2": np.array([self.log_s2])}
        for name in ("dec_s", "dec_t", "enc_t", "enc_s"):
            net = getattr(self, name)
            if net is not None:
                out.update(net.arrays(name))
        return out

    def load(self, values):
        self.mu_x, self.mu_y = values["mu_x"], values["mu_y"]
        self.log_s2 = float(values["log_s2"][0])
        for name in ("dec_s", "dec_t", "enc_t", "enc_s"):
            net = getattr(self, name)
            if net is not None:
                net.load(name, values)

    def architecture(self):
        return {
            name: (None if getattr(self, name) is None else getattr(self, name).sizes)
            for name in ("dec_s", "dec_t", "enc_t", "enc_s")
        }


def init_cvae(d, k=8, t=2, seed=0, decoder_hidden=DECODER_HIDDEN, encoder_hidden=ENCODER_HIDDEN,
              mu_x=None, mu_y=None, background=True):
    if k < 1 or t < 0 or d < 1:
        raise DimensionError("need k >= 1, t >= 0 and d >= 1")
    rng = as_stream(seed).child("cvae-init")
    dec_s = MlpParams.init([k, *decoder_hidden, d], rng.child("dec_s"))
    dec_t = MlpParams.init([t, *decoder_hidden, d], rng.child("dec_t")) if t else None
    enc_t = MlpParams.init([d, *encoder_hidden, 2 * (k + t)], rng.child("enc_t"))
    enc_s = MlpParams.init([d, *encoder_hidden, 2 * k], rng.child("enc_s")) if background else None
    mu_x = np.zeros(d) if mu_x is None else np.asarray(mu_x, dtype=np.float64).copy()
    mu_y = np.zeros(d) if mu_y is None else np.asarray(mu_y, dtype=np.float64).copy()
    return CvaeModel(dec_s, dec_t, enc_t, enc_s, mu_x, mu_y, 0.0)


def decode(model, z, t=None, is_target=True):
    """Reconstruction mean for target (``f_s(z) + f_t(t) + mu_x``) or background rows."""
    if not is_target and t is not None:
        raise ValueError("background rows have no target latent")
    out, _ = mlp_forward(model.dec_s, z)
    if is_target:
        if model.t:
            if t is None:
                raise ValueError("target decode needs t")
            out = out + mlp_forward(model.dec_t, t)[0]
        return out + model.mu_x
    return out + model.mu_y


def encode(model, rows, is_target=True):
    """Means and clamped log-stds of the encoder for a batch of rows."""
    net = model.enc_t if is_target else model.enc_s
    raw, _ = mlp_forward(net, rows)
    q = raw.shape[-1] // 2
    return raw[..., :q], np.clip(raw[..., q:], LOGSTD_MIN, LOGSTD_MAX)


# --------------------------------------------------------------- ELBO


def _zeros_like(model):
    return {key: np.zeros_like(val) for key, val in model.arrays().items()}


def _add_mlp(grads, prefix, gw, gb, scale):
    for i, (w, b) in enumerate(zip(gw, gb)):
        grads[f"{prefix}.W{i}"] += scale * w
        grads[f"{prefix}.b{i}"] += scale * b


def _set_terms(model, rows, eps, is_target, scale, grads):
    """ELBO contribution of one set and its gradients (accumulated in ``grads``)."""
    enc = model.enc_t if is_target else model.enc_s
    enc_prefix = "enc_t" if is_target else "enc_s"
    raw, enc_cache = mlp_forward(enc, rows)
    q = raw.shape[1] // 2
    mean, ls_raw = raw[:, :q], raw[:, q:]
    ls = np.clip(ls_raw, LOGSTD_MIN, LOGSTD_MAX)
    std = np.exp(ls)
    u = mean + std * eps
    k = model.k
    z = u[:, :k]
    fs, cs = mlp_forward(model.dec_s, z)
    recon = fs + (model.mu_x if is_target else model.mu_y)
    if is_target and model.t:
        ft, ct = mlp_forward(model.dec_t, u[:, k:])
        recon = recon + ft
    s2 = math.exp(model.log_s2)
    resid = rows - recon
    count = resid.size
    with np.errstate(over="ignore", invalid="ignore"):
        sq = float(np.sum(resid * resid))
        ll_rows = -0.5 * np.sum(resid * resid, axis=1) / s2 - 0.5 * rows.shape[1] * (LOG_2PI + model.log_s2)
        kl_rows = 0.5 * np.sum(mean * mean + std * std - 1.0 - 2.0 * ls, axis=1)
        value = float(np.sum(ll_rows - kl_rows))
    if not math.isfinite(value):
        bad = np.nonzero(~np.isfinite(ll_rows - kl_rows))[0]
        where = "target" if is_target else "background"
        raise DivergenceError(f"non-finite ELBO contribution in {where} row {int(bad[0]) if bad.size else -1}")

    g_recon = resid / s2
    grads["log_s2"][0] += scale * (-0.5 * count + sq / (2 * s2))
    mu_key = "mu_x" if is_target else "mu_y"
    grads[mu_key] += scale * g_recon.sum(axis=0)
    g_u = np.zeros_like(u)
    gw, gb, g_z = mlp_backward(model.dec_s, cs, g_recon)
    _add_mlp(grads, "dec_s", gw, gb, scale)
    g_u[:, :k] = g_z
    if is_target and model.t:
        gw, gb, g_t = mlp_backward(model.dec_t, ct, g_recon)
        _add_mlp(grads, "dec_t", gw, gb, scale)
        g_u[:, k:] = g_t
    g_mean = g_u - mean
    g_ls = (g_u * eps * std - (std * std - 1.0)) * ((ls_raw > LOGSTD_MIN) & (ls_raw < LOGSTD_MAX))
    gw, gb, _ = mlp_backward(enc, enc_cache, np.hstack([g_mean, g_ls]))
    _add_mlp(grads, enc_prefix, gw, gb, scale)
    return value


def draw_batch_noise(model, n_target, n_background, rng):
    rng = as_stream(rng)
    eps_x = rng.standard_normal((n_target, model.k + model.t))
    eps_y = rng.standard_normal((n_background, model.k)) if n_background else None
    return eps_x, eps_y


def cvae_elbo_and_gradients(model, x_batch, y_batch, rng=None, x_scale=1.0, y_scale=1.0, noise=None):
    """Single-draw ELBO estimate of a batch and gradients for every parameter.

    ``x_scale`` / ``y_scale`` weight each set (``n / batch`` for unbiased
    minibatch estimates). ``noise`` fixes the reparameterization draws.
    """
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    y_batch = None if y_batch is None else np.atleast_2d(np.asarray(y_batch, dtype=np.float64))
    for rows in (x_batch, y_batch):
        if rows is not None and not np.all(np.isfinite(rows)):
            raise ValueError("batch rows must be complete")
    n_y = 0 if y_batch is None else y_batch.shape[0]
    if n_y and model.enc_s is None:
        raise ValueError("model has no background encoder")
    eps_x, eps_y = noise if noise is not None else draw_batch_noise(model, x_batch.shape[0], n_y, rng)
    grads = _zeros_like(model)
    value = x_scale * _set_terms(model, x_batch, eps_x, True, x_scale, grads)
    if n_y:
        value += y_scale * _set_terms(model, y_batch, eps_y, False, y_scale, grads)
    return value, grads


# ------------------------------------------------------------ training


@dataclass
class CvaeFit:
    model: CvaeModel
    trace: list = field(default_factory=list)


def fit_cvae(pair, k=8, t=2, epochs=100, batch=100, lr=1e-3, seed=0, decoder_hidden=DECODER_HIDDEN,
             encoder_hidden=ENCODER_HIDDEN, callback=None):
    """ADAM ascent on the minibatch ELBO.

    Each step draws one target and one background batch from per-epoch
    shuffles; an epoch has as many steps as the larger set has batches.
    """
    if pair.has_missing:
        raise ValueError("fit_cvae needs complete data")
    x, y = np.asarray(pair.target), np.asarray(pair.background)
    return _fit(x, y, k, t, epochs, batch, lr, seed, decoder_hidden, encoder_hidden, callback)


def fit_vae(data, latent_dim, epochs=100, batch=100, lr=1e-3, seed=0, decoder_hidden=DECODER_HIDDEN,
            encoder_hidden=ENCODER_HIDDEN, callback=None):
    """Plain VAE on one data set (the ``t = 0``, no-background special case)."""
    x = np.asarray(data, dtype=np.float64)
    return _fit(x, None, latent_dim, 0, epochs, batch, lr, seed, decoder_hidden, encoder_hidden, callback)


def _fit(x, y, k, t, epochs, batch, lr, seed, decoder_hidden, encoder_hidden, callback):
    if epochs < 0 or batch < 1:
        raise ValueError("epochs must be >= 0 and batch >= 1")
    stream = as_stream(seed)
    model = init_cvae(
        x.shape[1], k, t, seed=seed, decoder_hidden=decoder_hidden, encoder_hidden=encoder_hidden,
        mu_x=x.mean(axis=0), mu_y=None if y is None else y.mean(axis=0), background=y is not None,
    )
    n, m = x.shape[0], 0 if y is None else y.shape[0]
    bx, by = min(batch, n), min(batch, m) if m else 0
    steps = max(math.ceil(n / bx), math.ceil(m / by) if m else 0)
    adam = AdamState(lr=lr)
    shuffle_rng, noise_rng = stream.child("shuffle"), stream.child("mc")
    trace = []
    for epoch in range(1, epochs + 1):
        px = _epoch_order(shuffle_rng, n, steps * bx)
        py = _epoch_order(shuffle_rng, m, steps * by) if m else None
        total = 0.0
        for s in range(steps):
            xb = x[px[s * bx:(s + 1) * bx]]
            yb = y[py[s * by:(s + 1) * by]] if m else None
            try:
                val, grads = cvae_elbo_and_gradients(model, xb, yb, noise_rng, n / bx, (m / by) if m else 1.0)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"epoch {epoch}: non-finite gradient")
            values = model.arrays()
            adam_step(adam, grads, values)
            model.load(values)
            total += val
        record = {"epoch": epoch, "elbo": total / steps}
        trace.append(record)
        if callback is not None:
            callback(record)
    return CvaeFit(model, trace)


def _epoch_order(rng, count, needed):
    """Concatenated permutations of ``range(count)`` covering ``needed`` draws."""
    reps = math.ceil(needed / count)
    return np.concatenate([rng.permutation(count) for _ in range(reps)])[:needed]


def sample_generative(model, which, count, rng=0):
    """Draw rows from the target (``z, t ~ N(0, I)``) or background (``z ~ N(0, I)``) generative path."""
    rng = as_stream(rng)
    if which == "target":
        z = rng.standard_normal((count, model.k))
        t = rng.standard_normal((count, model.t)) if model.t else None
        return decode(model, z, t, True)
    if which == "background":
        return decode(model, rng.standard_normal((count, model.k)), None, False)
    raise ValueError("which must be 'target' or 'background'")


def reconstruction_mse(model, rows, is_target, use_target_path=None):
    """MSE of encoder-mean reconstructions; ``use_target_path`` overrides the decoder path."""
    mean, _ = encode(model, rows, is_target)
    z = mean[:, : model.k]
    path = is_target if use_target_path is None else use_target_path
    if path:
        t = mean[:, model.k:] if is_target else np.zeros((rows.shape[0], model.t))
        recon = decode(model, z, t if model.t else None, True)
    else:
        recon = decode(model, z, None, False)
    return float(np.mean((rows - recon) ** 2))


# ----------------------------------------------------------- synthetic


def digits_on_noise(n=1000, m=1000, n_classes=4, amplitude=2.0, noise_scale=3.0, seed=0):
    """16-dim toy contrastive images: class patterns on shared structured noise.

    Each row is a 4 x 4 "image". Class ``c`` lights one of four fixed
    patterns (a row, column or diagonal bar) with strength ``amplitude``.
    Both sets carry the same nonlinear "grass" noise: a 3-dim latent mapped
    through ``tanh`` of a fixed random projection, scaled by
    ``noise_scale``, plus small isotropic noise. Returns a
    :class:`~clvm.data_model.ContrastivePair` with target labels.
    """
    from clvm.data_model import ContrastivePair

    if not 1 <= n_classes <= 4:
        raise ValueError("n_classes must be between 1 and 4")
    rng = as_stream(seed)
    patterns = np.zeros((4, 4, 4))
    patterns[0, 0, :] = 1.0
    patterns[1, :, 3] = 1.0
    patterns[2, np.arange(4), np.arange(4)] = 1.0
    patterns[3, 3, :2] = patterns[3, :2, 0] = 1.0
    patterns = patterns.reshape(4, 16)[:n_classes]
    proj = rng.child("proj").standard_normal((3, 16))

    def grass(count, stream):
        g = stream.standard_normal((count, 3))
        return noise_scale * np.tanh(g @ proj) + 0.1 * stream.standard_normal((count, 16))

    labels = np.arange(n) % n_classes
    target = amplitude * patterns[labels] + grass(n, rng.child("target"))
    background = grass(m, rng.child("background"))
    return ContrastivePair(target, background, target_labels=labels)
