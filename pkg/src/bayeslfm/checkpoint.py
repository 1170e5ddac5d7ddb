"""JSON checkpoint container for point-estimate models and variational posteriors.

Arrays are stored row-major as nested lists; floats are written with
``repr`` precision so a save/load round trip is exact and byte-stable.
"""

import json
import subprocess
from functools import lru_cache
from importlib import metadata

import numpy as np

from .baselines import FactorModel
from .blfm import PriorSpec, VariationalPosterior
from .errors import ShapeMismatchError

FORMAT = "bayeslfm-checkpoint/1"


@lru_cache(maxsize=1)
def code_version():
    """``git describe`` of the working tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=_package_dir(),
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _package_dir():
    import os
    return os.path.dirname(os.path.abspath(__file__))


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def model_to_dict(model, meta=None):
    if isinstance(model, VariationalPosterior):
        payload = {
            "kind": "posterior",
            "K": model.K, "m": model.m, "n": model.n,
            "r_mean": model.r_mean,
            "has_bias": model.has_bias,
            "prior": model.prior.as_dict(),
            "arrays": {name: _arr(getattr(model, name)) for name in model.param_names()},
        }
    elif isinstance(model, FactorModel):
        payload = {
            "kind": "factor_model",
            "K": model.K, "m": model.m, "n": model.n,
            "r_mean": model.r_mean,
            "has_bias": model.has_bias,
            "arrays": {"P": _arr(model.P), "Q": _arr(model.Q),
                       "b_u": _arr(model.b_u), "b_i": _arr(model.b_i)},
            "loss_history": list(model.loss_history),
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    payload["format"] = FORMAT
    payload["meta"] = {**model.meta, **(meta or {}), "code_version": code_version()}
    return payload


def _matrix(values, rows, K):
    a = np.array(values, dtype=float)
    return a.reshape(rows, K)


def model_from_dict(payload):
    if payload.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    K, m, n = payload["K"], payload["m"], payload["n"]
    arrays = payload["arrays"]
    if payload["kind"] == "posterior":
        kwargs = {
            "P_mean": _matrix(arrays["P_mean"], m, K),
            "P_logstd": _matrix(arrays["P_logstd"], m, K),
            "Q_mean": _matrix(arrays["Q_mean"], n, K),
            "Q_logstd": _matrix(arrays["Q_logstd"], n, K),
        }
        if payload["has_bias"]:
            for name in ("Bu_mean", "Bu_logstd", "Bi_mean", "Bi_logstd"):
                kwargs[name] = np.array(arrays[name], dtype=float)
        return VariationalPosterior(prior=PriorSpec.from_dict(payload["prior"]),
                                    r_mean=payload["r_mean"], meta=payload["meta"], **kwargs)
    if payload["kind"] == "factor_model":
        b_u = arrays.get("b_u")
        b_i = arrays.get("b_i")
        return FactorModel(
            P=_matrix(arrays["P"], m, K),
            Q=_matrix(arrays["Q"], n, K),
            r_mean=payload["r_mean"],
            b_u=None if b_u is None else np.array(b_u, dtype=float),
            b_i=None if b_i is None else np.array(b_i, dtype=float),
            loss_history=payload.get("loss_history", []),
            meta=payload["meta"],
        )
    raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")


def save(model, path, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, meta), fh, sort_keys=True)
        fh.write("\n")


def load(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def check_shape(model, ds):
    """Raise :class:`ShapeMismatchError` unless ``model`` covers ``ds``'s index."""
    if model.m != ds.m or model.n != ds.n:
        raise ShapeMismatchError(
            f"checkpoint is {model.m}x{model.n} (K={model.K}) but dataset is {ds.m}x{ds.n}")
