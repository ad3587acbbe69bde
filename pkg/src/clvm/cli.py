"""Command-line front end: ``clvm generate | fit | transform | sweep | eval``.

Every option can also come from a JSON ``--config`` file; explicit flags
win over the file, which wins over the built-in defaults. The resolved
configuration is written to ``config.json`` in the output directory and
re-runs to identical outputs. Errors end the process with exit code 2
(configuration), 3 (data) or 4 (numerical failure) and a single JSON line
``{"error": ..., "code": ..., "reason": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from clvm import __version__, baselines, clvm_em, cvae, data_model, metrics, serialization, variants, vi_engine
from clvm.clvm_em import ClvmParams
from clvm.data_model import ContrastivePair, format_float
from clvm.errors import (
    ConditioningError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FactorizationError,
    IntegrationError,
    MissingDataError,
    ParseError,
)
from clvm.num_core import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
ZERO_NORM_TOL = 1e-2
NO_LABEL = -(2**62)


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if v is None else int(v)


def _opt_str(v):
    return None if v is None else str(v)


# name -> (type, default, choices, help). Flags are the kebab-case names.
COMMON = {
    "out_dir": (_opt_str, None, None, "output directory; nothing is written outside it"),
    "seed": (int, 0, None, "root seed; substreams data, init and mc derive from it"),
    "threads": (_opt_int, None, None, "BLAS/OpenMP thread limit (fallback: CLVM_THREADS)"),
    "deterministic": (_bool, False, None, "force one thread so results do not depend on thread count"),
    "timing": (_bool, False, None, "record wall-clock milliseconds in traces"),
}

MODEL = {
    "method": (str, "em", ("em", "vi", "cvae", "cpca", "pca"), "fitting method"),
    "k": (int, 2, None, "shared latent dimension"),
    "t": (int, 2, None, "target latent dimension (projection width for pca/cpca)"),
    "standardize": (str, "zscore", ("none", "center", "zscore"), "column scaling applied before fitting"),
    "max_iter": (int, 500, None, "EM iterations"),
    "rel_tol": (float, 1e-7, None, "EM relative log-likelihood tolerance"),
    "iters": (int, 5000, None, "VI iterations"),
    "n_mc": (int, 1, None, "VI Monte Carlo draws per gradient"),
    "lr": (float, 1e-2, None, "VI ADAM learning rate"),
    "tol": (float, 1e-5, None, "VI moving-average relative tolerance"),
    "em_iters": (int, 500, None, "EM warm-start iterations for VI"),
    "likelihood": (str, "gaussian", ("gaussian", "student_t"), "VI observation model"),
    "robust_mode": (str, "analytic", ("analytic", "variational"), "Student-t treatment"),
    "w_prior": (str, "none", ("none", "group", "group_penalty", "horseshoe"), "prior on W"),
    "s_prior": (str, "none", ("none", "ard"), "prior on S"),
    "rho": (float, 400.0, None, "group penalty strength"),
    "b_g": (float, 1.0, None, "global horseshoe scale"),
    "a0": (float, 1e-3, None, "ARD inverse-gamma shape"),
    "b0": (float, 1e-3, None, "ARD inverse-gamma scale"),
    "prune_delta": (float, 1e-3, None, "horseshoe pruning threshold on rho^2 tau^2"),
    "prune_p0": (float, 0.9, None, "horseshoe pruning probability"),
    "epochs": (int, 100, None, "cVAE epochs"),
    "batch": (int, 100, None, "cVAE batch size"),
    "cvae_lr": (float, 1e-3, None, "cVAE ADAM learning rate"),
    "decoder_hidden": (_int_list, [128, 256], None, "cVAE decoder hidden widths, comma separated"),
    "encoder_hidden": (_int_list, [256, 128], None, "cVAE encoder hidden widths, comma separated"),
    "alpha": (float, 1.0, None, "cPCA contrast strength"),
}

DATA = {
    "target": (_opt_str, None, None, "target CSV"),
    "background": (_opt_str, None, None, "background CSV"),
    "labels": (_opt_str, None, None, "target labels CSV (id,label)"),
    "background_labels": (_opt_str, None, None, "background labels CSV"),
}

COMMANDS = {
    "generate": {
        "generator": (str, "subgroups", ("subgroups", "model", "digits"), "synthetic recipe"),
        "n_per_subgroup": (int, 100, None, "subgroups: rows per target subgroup"),
        "m_background": (int, 400, None, "subgroups: background rows"),
        "with_outliers": (int, 0, None, "uniform outlier rows appended to each set"),
        "outlier_bound": (float, 20.0, None, "outliers are uniform in [-bound, bound]"),
        "missing_fraction": (float, 0.0, None, "fraction of target cells deleted"),
        "n": (int, 400, None, "model/digits: target rows"),
        "m": (int, 400, None, "model/digits: background rows"),
        "d": (int, 30, None, "model: features"),
        "k": (int, 2, None, "model: shared latent dimension"),
        "t": (int, 2, None, "model: target latent dimension"),
        "clusters": (int, 4, None, "model/digits: number of target classes"),
        "cluster_sep": (float, 4.0, None, "model: radius of cluster centers in t-space"),
        "sigma2": (float, 1.0, None, "model: noise variance"),
        "amplitude": (float, 2.0, None, "digits: pattern strength"),
        "noise_scale": (float, 3.0, None, "digits: shared noise strength"),
        **COMMON,
    },
    "fit": {**DATA, **MODEL, **COMMON},
    "transform": {
        "model": (_opt_str, None, None, "model JSON written by fit"),
        **DATA,
        **COMMON,
    },
    "sweep": {
        "param": (str, "rho", ("rho", "alpha", "k", "t", "b_g"), "swept parameter"),
        "grid": (_float_list, [], None, "comma separated grid values"),
        "clusters": (_opt_int, None, None, "k-means clusters for the silhouette column"),
        **DATA,
        **MODEL,
        **COMMON,
    },
    "eval": {
        "latents": (_opt_str, None, None, "latent CSV"),
        "labels": (_opt_str, None, None, "labels CSV; default is the label column of the latent CSV"),
        "reference": (_opt_str, None, None, "second latent CSV for the Procrustes distance"),
        "set": (str, "target", ("target", "background", "all"), "rows to score"),
        "columns": (str, "auto", ("auto", "t", "z", "all"), "latent columns to score"),
        "clusters": (_opt_int, None, None, "k-means clusters (default: distinct labels)"),
        **COMMON,
    },
}

POSITIONAL = {"generate": "generator"}
# paths that describe where outputs go rather than what is computed
NOT_RECORDED = ("out_dir", "threads", "deterministic")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="clvm", description="Contrastive latent variable models")
    parser.add_argument("--version", action="version", version=f"clvm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, table in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values (flags win)")
        pos = POSITIONAL.get(name)
        if pos:
            _, _, choices, help_ = table[pos]
            p.add_argument(pos, nargs="?", choices=choices, help=help_)
        for key, (kind, default, choices, help_) in table.items():
            if key == pos:
                continue
            flag = "--" + key.replace("_", "-")
            if kind is _bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, help=help_)
            else:
                p.add_argument(flag, dest=key, type=str, choices=choices, help=f"{help_} (default {default})")
    return parser


def _coerce(table, key, value):
    kind, _, choices, _ = table[key]
    try:
        out = kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"option {key}: {exc}") from None
    if choices is not None and out not in choices:
        raise ConfigError(f"option {key}: {out!r} is not one of {list(choices)}")
    return out


def resolve_config(command, flags, environ=None):
    """Defaults, then the ``--config`` file, then explicit flags."""
    environ = os.environ if environ is None else environ
    table = COMMANDS[command]
    resolved = {key: spec[1] for key, spec in table.items()}
    path = flags.pop("config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = {str(k).replace("-", "_"): v for k, v in loaded.items()}
        serialization.reject_unknown(loaded, table, where=f"{command} config")
        for key, val in loaded.items():
            resolved[key] = None if val is None else _coerce(table, key, val)
    for key, val in flags.items():
        resolved[key] = _coerce(table, key, val)
    if resolved.get("threads") is None and environ.get("CLVM_THREADS"):
        resolved["threads"] = _coerce(table, "threads", environ["CLVM_THREADS"])
    if resolved.get("out_dir") is None:
        raise ConfigError("--out-dir is required")
    return resolved


# ------------------------------------------------------------------ helpers


class Outputs:
    """Writes files strictly inside one directory."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = (self.root / name).resolve()
        if self.root != p and self.root not in p.parents:
            raise ConfigError(f"refusing to write {name} outside the output directory")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _recorded(cfg, command):
    out = {k: v for k, v in cfg.items() if k not in NOT_RECORDED}
    out["command"] = command
    return out


def _write_config(out, cfg, command):
    rec = {k: v for k, v in _recorded(cfg, command).items() if k != "command"}
    serialization.write_json(out.path("config.json"), rec)


def _require(cfg, *keys):
    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _load_inputs(cfg, need_background=True):
    _require(cfg, "target", *(("background",) if need_background else ()))
    try:
        tgt, tmask, header = data_model.load_csv(cfg["target"])
        if cfg.get("background"):
            bg, bmask, bheader = data_model.load_csv(cfg["background"])
            if len(bheader) != len(header):
                raise ParseError(f"column counts differ: {len(header)} vs {len(bheader)}")
        else:
            bg, bmask = None, None
        tl = data_model.load_labels(cfg["labels"]) if cfg.get("labels") else None
        bl = data_model.load_labels(cfg["background_labels"]) if cfg.get("background_labels") else None
    except FileNotFoundError as exc:
        raise ParseError(f"input file not found: {exc.filename}") from None
    if tl is not None and tl.size != tgt.shape[0]:
        raise DimensionError(f"labels have {tl.size} rows, target has {tgt.shape[0]}")
    if bl is not None and bg is not None and bl.size != bg.shape[0]:
        raise DimensionError(f"background labels have {bl.size} rows, background has {bg.shape[0]}")
    return tgt, tmask, bg, bmask, tl, bl, tuple(header)


def _latent_rows(set_name, t_lat, z_lat, labels, n, T, K):
    rows = []
    for i in range(n):
        lab = "" if labels is None else str(int(labels[i]))
        tv = [format_float(v) for v in t_lat[i]] if t_lat is not None else [""] * T
        zv = [format_float(v) for v in z_lat[i]] if z_lat is not None else [""] * K
        rows.append([str(i), set_name, lab, *tv, *zv])
    return rows


def write_latents(path, T, K, target_t, target_z, background_z, target_labels=None, background_labels=None,
                  background_t=None):
    """Latent CSV ``id,set,label,t1..tT,z1..zK``: target rows, then background rows."""
    n = (target_t if target_t is not None else target_z).shape[0]
    header = ["id", "set", "label", *[f"t{j + 1}" for j in range(T)], *[f"z{j + 1}" for j in range(K)]]
    rows = _latent_rows("target", target_t if T else None, target_z if K else None, target_labels, n, T, K)
    if background_z is not None or background_t is not None:
        m = (background_z if background_z is not None else background_t).shape[0]
        rows += _latent_rows(
            "background", background_t if T and background_t is not None else None,
            background_z if K else None, background_labels, m, T, K,
        )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_latents(path):
    """Returns ``(ids, sets, labels, t, z)``; empty label cells hold ``NO_LABEL``."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"latent file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header[:3] != ["id", "set", "label"]:
            raise ParseError(f"{path}: header must start with id,set,label")
        tcols = [i for i, h in enumerate(header) if h.startswith("t") and h[1:].isdigit()]
        zcols = [i for i, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
        ids, sets, labels, tv, zv = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                ids.append(int(row[0]))
                sets.append(row[1])
                labels.append(int(row[2]) if row[2] != "" else None)
                tv.append([float(row[i]) if row[i] != "" else math.nan for i in tcols])
                zv.append([float(row[i]) if row[i] != "" else math.nan for i in zcols])
            except ValueError:
                raise ParseError(f"{path}: malformed value in row {lineno}") from None
    lab = np.array([NO_LABEL if v is None else v for v in labels], dtype=np.int64)
    n = len(ids)
    return (np.array(ids), np.array(sets), lab, np.array(tv, dtype=float).reshape(n, len(tcols)),
            np.array(zv, dtype=float).reshape(n, len(zcols)))


def _scale_pair(tgt, tmask, bg, bmask, mode, columns):
    pair = ContrastivePair(tgt, bg, tmask, bmask, columns=columns)
    return data_model.standardize(pair, mode)


def _apply_scaling(scaling, values, mask):
    if scaling is None:
        return values
    return np.where(mask, scaling.apply(np.where(mask, values, 0.0)), np.nan)


# --------------------------------------------------------------- fitting


def _spec_from(cfg, d):
    return vi_engine.ModelSpec(
        d=d, k=cfg["k"], t=cfg["t"], likelihood=cfg["likelihood"], w_prior=cfg["w_prior"],
        s_prior=cfg["s_prior"], robust_mode=cfg["robust_mode"], rho=cfg["rho"], b_g=cfg["b_g"],
        a0=cfg["a0"], b0=cfg["b0"], prune_delta=cfg["prune_delta"], prune_p0=cfg["prune_p0"],
    )


def _validate_model_cfg(cfg):
    method = cfg["method"]
    if method != "vi" and (cfg["w_prior"] != "none" or cfg["s_prior"] != "none" or cfg["likelihood"] != "gaussian"):
        raise ConfigError(f"priors and robust likelihoods need --method vi, not {method}")
    if cfg["k"] < 0 or cfg["t"] < 0:
        raise ConfigError("k and t must be non-negative")
    if method in ("cpca", "pca") and cfg["t"] < 1:
        raise ConfigError(f"{method} needs --t >= 1 projection columns")
    if method == "cvae" and cfg["k"] < 1:
        raise ConfigError("cvae needs --k >= 1")


def _timed_em(pair, cfg, seed):
    records, start = [], time.perf_counter()

    def cb(it, ll):
        wall = round(1000 * (time.perf_counter() - start), 3) if cfg["timing"] else None
        records.append({"iter": it, "loglik": ll, "wall_ms": wall})

    fitted = clvm_em.fit_em(pair, cfg["k"], cfg["t"], max_iter=cfg["max_iter"], rel_tol=cfg["rel_tol"],
                            seed=seed, callback=cb)
    return fitted, records


def fit_model(cfg, pair, scaling, seed):
    """Fit by ``cfg['method']``; returns a dict with the model document, latents and trace."""
    method = cfg["method"]
    config = _recorded(cfg, "fit")
    labels = (pair.target_labels, pair.background_labels)
    if method in ("em", "vi"):
        if method == "em":
            if pair.has_missing:
                raise MissingDataError("EM needs complete data; use --method vi for missing cells")
            fitted, trace = _timed_em(pair, cfg, seed)
            objective = fitted.trace[-1]
        else:
            spec = _spec_from(cfg, pair.d)
            init = vi_engine.init_state(spec, pair, seed=seed, em_iters=cfg["em_iters"])
            fitted, _ = vi_engine.fit_vi(spec, pair, iters=cfg["iters"], n_mc=cfg["n_mc"], lr=cfg["lr"],
                                         seed=seed, tol=cfg["tol"], init=init, timing=cfg["timing"])
            trace = fitted.trace
            objective = fitted.extras["final_elbo"]
        doc = serialization.clvm_to_doc(fitted, seed, scaling, config)
        return {
            "doc": doc, "trace": trace, "objective": objective, "T": fitted.params.t, "K": fitted.params.k,
            "latents": (fitted.target_t, fitted.target_z, fitted.background_z, None), "labels": labels,
            "S": fitted.params.S, "W": fitted.params.W,
        }
    if pair.has_missing:
        raise MissingDataError(f"{method} needs complete data; use --method vi for missing cells")
    if method == "cvae":
        start = time.perf_counter()
        res = cvae.fit_cvae(pair, k=cfg["k"], t=cfg["t"], epochs=cfg["epochs"], batch=cfg["batch"],
                            lr=cfg["cvae_lr"], seed=seed, decoder_hidden=tuple(cfg["decoder_hidden"]),
                            encoder_hidden=tuple(cfg["encoder_hidden"]))
        total = round(1000 * (time.perf_counter() - start), 3) if cfg["timing"] else None
        trace = [dict(r, wall_ms=total if i == len(res.trace) - 1 else None) for i, r in enumerate(res.trace)]
        model = res.model
        tz, _ = cvae.encode(model, pair.target, True)
        bz, _ = cvae.encode(model, pair.background, False)
        T = model.t
        doc = serialization.cvae_to_doc(model, trace, seed, scaling, config)
        return {
            "doc": doc, "trace": trace, "objective": res.trace[-1]["elbo"] if res.trace else None,
            "T": T, "K": model.k, "latents": (tz[:, model.k:], tz[:, :model.k], bz, None), "labels": labels,
            "S": None, "W": None,
        }
    q = cfg["t"]
    if q >= pair.d:
        raise DimensionError(f"projection width {q} must be below d = {pair.d}")
    if method == "cpca":
        res = baselines.fit_cpca(pair, cfg["alpha"], q)
        proj, lam = res.projection, res.eigenvalues
    else:
        proj, _, lam = baselines.pca(pair.target, q)
    objective = float(np.sum(lam[:q]))
    mean = pair.target.mean(axis=0)
    tlat = (pair.target - mean) @ proj
    blat = (pair.background - pair.background.mean(axis=0)) @ proj
    extra = {"eigenvalues": [float(v) for v in lam], "alpha": cfg["alpha"] if method == "cpca" else None,
             "background_mean": serialization.array_to_json(pair.background.mean(axis=0))}
    doc = serialization.projection_to_doc(method, proj, mean, seed, scaling, config, extra)
    trace = [{"iter": 0, "objective": objective, "wall_ms": None}]
    return {
        "doc": doc, "trace": trace, "objective": objective, "T": q, "K": 0,
        "latents": (tlat, None, None, blat), "labels": labels, "S": None, "W": proj,
    }


def _emit_fit(out, result, latent_name="latents.csv", model_name="model.json", trace_name="trace.jsonl"):
    tt, tz, bz, bt = result["latents"]
    tl, bl = result["labels"]
    serialization.write_json(out.path(model_name), result["doc"])
    write_latents(out.path(latent_name), result["T"], result["K"], tt, tz, bz, tl, bl, background_t=bt)
    serialization.write_jsonl(out.path(trace_name), result["trace"])


def _prepared_pair(cfg):
    tgt, tmask, bg, bmask, tl, bl, columns = _load_inputs(cfg)
    pair, scaling = _scale_pair(tgt, tmask, bg, bmask, cfg["standardize"], columns)
    return replace(pair, target_labels=tl, background_labels=bl), scaling


# -------------------------------------------------------------- commands


def cmd_generate(cfg, out):
    gen = cfg["generator"]
    data = RngStream(cfg["seed"]).child("data")
    if cfg["with_outliers"] < 0 or not 0.0 <= cfg["missing_fraction"] < 1.0:
        raise ConfigError("with-outliers must be >= 0 and missing-fraction in [0, 1)")
    try:
        if gen == "subgroups":
            pair = data_model.generate_synthetic_subgroups(cfg["n_per_subgroup"], cfg["m_background"],
                                                           seed=data.child("subgroups"))
        elif gen == "digits":
            pair = cvae.digits_on_noise(cfg["n"], cfg["m"], cfg["clusters"], cfg["amplitude"],
                                        cfg["noise_scale"], seed=data.child("digits"))
        else:
            pair = _model_pair(cfg, data)
    except (ValueError, DimensionError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["with_outliers"]:
        b = cfg["outlier_bound"]
        pair = data_model.inject_outliers(pair, cfg["with_outliers"], -b, b, seed=data.child("outliers"))
    if cfg["missing_fraction"] > 0:
        pair = data_model.delete_target_cells(pair, cfg["missing_fraction"], seed=data.child("missing"))
    header = [f"f{j + 1}" for j in range(pair.d)]
    data_model.write_csv(out.path("target.csv"), pair.target, pair.target_mask, header)
    data_model.write_csv(out.path("background.csv"), pair.background, pair.background_mask, header)
    labels = pair.target_labels if pair.target_labels is not None else np.zeros(pair.n, dtype=np.int64)
    data_model.write_labels(out.path("labels.csv"), labels)
    if pair.background_labels is not None:
        data_model.write_labels(out.path("background_labels.csv"), pair.background_labels)
    return {"target_rows": pair.n, "background_rows": pair.m, "d": pair.d}


def _model_pair(cfg, data):
    d, k, t, c = cfg["d"], cfg["k"], cfg["t"], cfg["clusters"]
    if k < 0 or t < 1 or c < 1 or k + t >= d or cfg["sigma2"] <= 0:
        raise ConfigError("model generator needs t >= 1, k >= 0, k + t < d, clusters >= 1 and sigma2 > 0")
    rng = data.child("params")
    S = rng.standard_normal((d, k))
    W = rng.standard_normal((d, t))
    params = ClvmParams(S, W, np.zeros(d), np.zeros(d), cfg["sigma2"])
    angles = 2 * np.pi * np.arange(c) / c
    means = np.zeros((c, t))
    means[:, 0] = cfg["cluster_sep"] * np.cos(angles)
    if t > 1:
        means[:, 1] = cfg["cluster_sep"] * np.sin(angles)
    return data_model.generate_from_model(params, means, cfg["n"], cfg["m"], seed=data.child("draws"))


def cmd_fit(cfg, out):
    _validate_model_cfg(cfg)
    pair, scaling = _prepared_pair(cfg)
    result = fit_model(cfg, pair, scaling, cfg["seed"])
    _emit_fit(out, result)
    return {"objective": result["objective"]}


def cmd_transform(cfg, out):
    _require(cfg, "model")
    try:
        kind, model, doc = serialization.load_model(cfg["model"])
    except FileNotFoundError:
        raise ParseError(f"model file not found: {cfg['model']}") from None
    tgt, tmask, bg, bmask, tl, bl, _ = _load_inputs(cfg, need_background=False)
    scaling = serialization.scaling_from_doc(doc.get("scaling"))
    d = {"clvm": lambda: model.d, "cvae": lambda: model.d, "projection": lambda: model[0].shape[0]}[kind]()
    for name, rows in (("target", tgt), ("background", bg)):
        if rows is not None and rows.shape[1] != d:
            raise DimensionError(f"{name} has {rows.shape[1]} columns, model has d={d}")
    x = _apply_scaling(scaling, tgt, tmask)
    y = None if bg is None else _apply_scaling(scaling, bg, bmask)
    bt = None
    if kind == "clvm":
        T, K = model.t, model.k
        tt, tz = clvm_em.transform_observed(model, x, tmask, True)
        bz = None if y is None else clvm_em.transform_observed(model, y, bmask, False)[1]
    else:
        if not tmask.all() or (bmask is not None and not bmask.all()):
            raise MissingDataError(f"{kind} models need complete rows")
        if kind == "cvae":
            T, K = model.t, model.k
            enc, _ = cvae.encode(model, x, True)
            tt, tz = enc[:, K:], enc[:, :K]
            bz = None if y is None else cvae.encode(model, y, False)[0]
        else:
            proj, mean = model
            T, K = proj.shape[1], 0
            tt, tz, bz = (x - mean) @ proj, None, None
            if y is not None:
                bmean = serialization.array_from_json(doc["background_mean"])
                bt = (y - bmean) @ proj
    write_latents(out.path("latents.csv"), T, K, tt, tz, bz, tl, bl, background_t=bt)
    return {"rows": x.shape[0] + (0 if y is None else y.shape[0])}


def _sweep_method(cfg, param):
    default = {"rho": "vi", "b_g": "vi", "alpha": "cpca"}.get(param)
    method = cfg["method"]
    if default and method != default:
        if method != MODEL["method"][1]:
            raise ConfigError(f"sweeping {param} needs --method {default}")
        method = default
    return method


def cmd_sweep(cfg, out):
    param, grid = cfg["param"], cfg["grid"]
    if not grid:
        raise ConfigError("sweep grid is empty")
    if len(set(grid)) != len(grid):
        raise ConfigError("sweep grid has repeated values")
    cfg = dict(cfg, method=_sweep_method(cfg, param))
    if param == "rho" and cfg["w_prior"] == "none":
        cfg["w_prior"] = "group"
    if param == "rho" and cfg["w_prior"] not in ("group", "group_penalty"):
        raise ConfigError("sweeping rho needs the group prior on W")
    if param == "b_g" and cfg["w_prior"] != "horseshoe":
        cfg["w_prior"] = "horseshoe"
    pair, scaling = _prepared_pair(cfg)
    rows = []
    for value in grid:
        if param in ("k", "t"):
            if value != int(value):
                raise ConfigError(f"{param} grid values must be integers")
            value = int(value)
        point = dict(cfg, **{param: value})
        _validate_model_cfg(point)
        result = fit_model(point, pair, scaling, cfg["seed"])
        tag = f"{param}={value if isinstance(value, int) else format_float(value)}"
        _emit_fit(out, result, f"latents_{tag}.csv", f"model_{tag}.json", f"trace_{tag}.jsonl")
        if result["W"] is not None:
            norms = variants.row_norms(result["W"]) if result["W"].size else np.zeros(pair.d)
        else:
            norms = np.zeros(0)
        rank = variants.effective_shared_rank(result["S"]) if result["S"] is not None and result["S"].size else 0
        row = {
            "value": value,
            "objective": result["objective"],
            "effective_rank": rank,
            "zero_norm_rows": int(np.sum(norms < ZERO_NORM_TOL)) if norms.size else None,
            "row_norms": [float(v) for v in norms],
        }
        tlat = result["latents"][0] if result["T"] else result["latents"][1]
        if cfg["clusters"]:
            km = metrics.kmeans_labels(tlat, cfg["clusters"], seed=cfg["seed"])
            row["kmeans_silhouette"] = metrics.silhouette(tlat, km) if len(np.unique(km)) > 1 else 0.0
        if pair.target_labels is not None and len(np.unique(pair.target_labels)) > 1:
            row["ari"] = metrics.kmeans_ari(tlat, pair.target_labels, seed=cfg["seed"])
        rows.append(row)
    summary = {"param": param, "method": cfg["method"], "points": rows}
    if cfg["clusters"]:
        summary["selected"] = metrics.select_by_silhouette(
            [r["value"] for r in rows], [r["kmeans_silhouette"] for r in rows])
    serialization.write_json(out.path("summary.json"), summary)
    _write_summary_csv(out.path("summary.csv"), rows)
    return {"points": len(rows)}


def _write_summary_csv(path, rows):
    keys = ["value", "objective", "effective_rank", "zero_norm_rows", "kmeans_silhouette", "ari", "row_norms"]
    keys = [k for k in keys if any(k in r for r in rows)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            cells = []
            for k in keys:
                v = r.get(k)
                if k == "row_norms":
                    cells.append(";".join(format_float(x) for x in v))
                elif v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(format_float(v))
                else:
                    cells.append(str(v))
            w.writerow(cells)


def _select_columns(t, z, which):
    if which == "auto":
        which = "t" if t.shape[1] and np.all(np.isfinite(t)) else "z"
    mat = {"t": t, "z": z, "all": np.hstack([t, z])}[which]
    if mat.shape[1] == 0:
        raise DimensionError(f"latent file has no {which} columns")
    if not np.all(np.isfinite(mat)):
        raise DimensionError(f"{which} columns are empty for some selected rows")
    return mat


def cmd_eval(cfg, out):
    _require(cfg, "latents")
    _, sets, lab, t, z = read_latents(cfg["latents"])
    keep = np.ones(sets.size, dtype=bool) if cfg["set"] == "all" else sets == cfg["set"]
    if not keep.any():
        raise DimensionError(f"latent file has no {cfg['set']} rows")
    lat = _select_columns(t[keep], z[keep], cfg["columns"])
    if cfg["labels"]:
        try:
            labels = data_model.load_labels(cfg["labels"])
        except FileNotFoundError:
            raise ParseError(f"labels file not found: {cfg['labels']}") from None
    else:
        labels = None if np.any(lab[keep] == NO_LABEL) else lab[keep]
    report = {"rows": int(lat.shape[0]), "dims": int(lat.shape[1])}
    if labels is not None:
        if labels.size != lat.shape[0]:
            raise DimensionError(f"labels have {labels.size} rows, latents have {lat.shape[0]}")
        n_lab = len(np.unique(labels))
        clusters = cfg["clusters"] or n_lab
        pred = metrics.kmeans_labels(lat, clusters, seed=cfg["seed"])
        report["clusters"] = clusters
        report["ari"] = metrics.ari(labels, pred)
        report["silhouette"] = metrics.silhouette(lat, labels) if 1 < n_lab < lat.shape[0] else None
    if cfg["reference"]:
        _, rsets, _, rt, rz = read_latents(cfg["reference"])
        rkeep = np.ones(rsets.size, dtype=bool) if cfg["set"] == "all" else rsets == cfg["set"]
        ref = _select_columns(rt[rkeep], rz[rkeep], cfg["columns"])
        if ref.shape != lat.shape:
            raise DimensionError(f"reference latents have shape {ref.shape}, latents have {lat.shape}")
        report["procrustes"] = metrics.procrustes_distance(ref, lat)
    serialization.write_json(out.path("metrics.json"), report)
    return report


HANDLERS = {"generate": cmd_generate, "fit": cmd_fit, "transform": cmd_transform, "sweep": cmd_sweep,
            "eval": cmd_eval}

DATA_ERRORS = (ParseError, MissingDataError, DimensionError, OSError)
NUMERICAL_ERRORS = (DivergenceError, FactorizationError, ConditioningError, IntegrationError,
                    FloatingPointError, np.linalg.LinAlgError)


def _fail(kind, code, exc):
    reason = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": kind, "code": code, "reason": reason}) + "\n")
    return code


def run(argv=None, environ=None):
    """Execute one command; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required: generate, fit, transform, sweep or eval")
        flags = {k: v for k, v in vars(args).items() if k != "command"}
        cfg = resolve_config(args.command, flags, environ)
        threads = 1 if cfg["deterministic"] else cfg["threads"]
        if threads is not None and threads < 1:
            raise ConfigError("threads must be positive")
        out = Outputs(cfg["out_dir"])
        with threadpool_limits(limits=threads):
            with np.errstate(all="ignore"):
                HANDLERS[args.command](cfg, out)
        _write_config(out, cfg, args.command)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except NUMERICAL_ERRORS as exc:
        return _fail("numerical", EXIT_NUMERICAL, exc)
    except DATA_ERRORS as exc:
        return _fail("data", EXIT_DATA, exc)
    except ValueError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
