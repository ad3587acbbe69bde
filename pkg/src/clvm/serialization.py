"""JSON model documents.

Matrices are stored column-major as ``{"shape": [...], "order": "F",
"data": [...]}``. Floats are written with ``repr`` precision, so a save/load
round trip reproduces every array bit for bit.
"""

from __future__ import annotations

import json

import numpy as np

from clvm.clvm_em import ClvmParams
from clvm.cvae import CvaeModel, MlpParams
from clvm.data_model import ScalingParams
from clvm.errors import ConfigError, ParseError

FORMAT_VERSION = 1


def array_to_json(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot serialize non-finite values")
    return {"shape": list(a.shape), "order": "F", "data": a.ravel(order="F").tolist()}


def array_from_json(doc):
    try:
        shape = tuple(int(s) for s in doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
        order = doc.get("order", "F")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed array entry: {exc}") from None
    if order not in ("F", "C"):
        raise ParseError(f"unknown array order {order!r}")
    if data.size != int(np.prod(shape)):
        raise ParseError(f"array data has {data.size} values, shape {shape} needs {int(np.prod(shape))}")
    return data.reshape(shape, order=order)


def dumps(doc):
    return json.dumps(doc, indent=1, sort_keys=False, allow_nan=False) + "\n"


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(doc))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False, allow_nan=False) + "\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def _scaling_doc(scaling):
    return None if scaling is None else _jsonable(scaling.to_dict())


def scaling_from_doc(doc):
    if doc is None:
        return None
    return ScalingParams(
        doc["mode"], np.asarray(doc["center"], dtype=np.float64), np.asarray(doc["scale"], dtype=np.float64),
        tuple(doc.get("flagged", ())),
    )


def _check_version(doc, kind):
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ParseError("model document lacks format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {doc['format_version']}")
    if doc.get("kind") not in kind:
        raise ParseError(f"model kind {doc.get('kind')!r} is not one of {sorted(kind)}")


# ------------------------------------------------------------- EM / VI


def clvm_to_doc(fitted, seed, scaling=None, config=None):
    """Document for an EM or VI fit; VI adds its variational blocks."""
    p = fitted.params
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "clvm",
        "method": fitted.method,
        "dims": {"d": p.d, "k": p.k, "t": p.t},
        "S": array_to_json(p.S),
        "W": array_to_json(p.W),
        "mu_x": array_to_json(p.mu_x),
        "mu_y": array_to_json(p.mu_y),
        "sigma2": p.sigma2,
        "trace": _jsonable(fitted.trace),
        "converged": bool(fitted.converged),
        "n_iter": int(fitted.n_iter),
        "config": _jsonable(config if config is not None else fitted.config),
        "seed": int(seed),
        "scaling": _scaling_doc(scaling),
    }
    ex = fitted.extras
    state = ex.get("state")
    if state is not None:
        # latent and missing-cell blocks are per-row and live in the latent CSV
        doc["variational"] = {
            key: array_to_json(val)
            for key, val in state.blocks.items()
            if key.split("_")[0] not in ("t", "zx", "zy", "xm", "ym")
        }
        doc["spec"] = _jsonable(ex["spec"].to_dict())
        doc["final_elbo"] = float(ex["final_elbo"])
    if "pruned_rows" in ex:
        from clvm.vi_engine import horseshoe_state

        hs = horseshoe_state(ex["spec"], state)
        mean, std = hs.log_scale_moments()
        doc["horseshoe"] = {
            "log_scale_mean": array_to_json(mean),
            "log_scale_std": array_to_json(std),
            "rho2_mu": array_to_json(hs.rho2_mu),
            "rho2_ls": array_to_json(hs.rho2_ls),
            "tau2_mu": hs.tau2_mu,
            "tau2_ls": hs.tau2_ls,
            "b_g": hs.b_g,
            "pruned_rows": [int(i) for i in np.flatnonzero(ex["pruned_rows"])],
        }
    return doc


def clvm_params_from_doc(doc):
    _check_version(doc, {"clvm"})
    try:
        params = ClvmParams(
            array_from_json(doc["S"]), array_from_json(doc["W"]),
            array_from_json(doc["mu_x"]), array_from_json(doc["mu_y"]), float(doc["sigma2"]),
        )
    except KeyError as exc:
        raise ParseError(f"model document lacks {exc.args[0]!r}") from None
    dims = doc.get("dims", {})
    if dims and (dims.get("d"), dims.get("k"), dims.get("t")) != (params.d, params.k, params.t):
        raise ParseError("dims field disagrees with the stored arrays")
    return params


# ------------------------------------------------------------------ cVAE


def cvae_to_doc(model, trace, seed, scaling=None, config=None):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "cvae",
        "architecture": {"d": model.d, "k": model.k, "t": model.t, "layers": model.architecture(),
                         "activation": "relu", "output": "linear"},
        "arrays": {key: array_to_json(val) for key, val in model.arrays().items()},
        "trace": _jsonable(trace),
        "config": _jsonable(config or {}),
        "seed": int(seed),
        "scaling": _scaling_doc(scaling),
    }
    return doc


def cvae_from_doc(doc):
    _check_version(doc, {"cvae"})
    try:
        values = {key: array_from_json(val) for key, val in doc["arrays"].items()}
        layers = doc["architecture"]["layers"]
    except KeyError as exc:
        raise ParseError(f"cVAE document lacks {exc.args[0]!r}") from None
    nets = {}
    for name in ("dec_s", "dec_t", "enc_t", "enc_s"):
        sizes = layers.get(name)
        if sizes is None:
            nets[name] = None
            continue
        net = MlpParams.zeros(sizes)
        try:
            net.load(name, values)
        except KeyError as exc:
            raise ParseError(f"cVAE document lacks layer array {exc.args[0]!r}") from None
        MlpParams(net.weights, net.biases)  # shape validation
        nets[name] = net
    model = CvaeModel(nets["dec_s"], nets["dec_t"], nets["enc_t"], nets["enc_s"],
                      values["mu_x"], values["mu_y"], float(values["log_s2"][0]))
    return model


# ------------------------------------------------------------ linear maps


def projection_to_doc(method, projection, mean, seed, scaling=None, config=None, extra=None):
    """Document for PCA / cPCA: latents are ``(rows - mean) @ projection``."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "projection",
        "method": method,
        "dims": {"d": int(projection.shape[0]), "q": int(projection.shape[1])},
        "projection": array_to_json(projection),
        "mean": array_to_json(mean),
        "config": _jsonable(config or {}),
        "seed": int(seed),
        "scaling": _scaling_doc(scaling),
    }
    if extra:
        doc.update(_jsonable(extra))
    return doc


def load_model(path):
    """Read any model document; returns ``(kind, model, doc)``."""
    doc = read_json(path)
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind == "clvm":
        return kind, clvm_params_from_doc(doc), doc
    if kind == "cvae":
        return kind, cvae_from_doc(doc), doc
    if kind == "projection":
        _check_version(doc, {"projection"})
        return kind, (array_from_json(doc["projection"]), array_from_json(doc["mean"])), doc
    raise ParseError(f"{path}: unknown model kind {kind!r}")


def reject_unknown(config, allowed, where="config"):
    unknown = sorted(set(config) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
