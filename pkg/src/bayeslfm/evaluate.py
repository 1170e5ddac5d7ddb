"""RMSE, overfitting gap, posterior traces and hyperparameter sweeps."""

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import FactorModel
from .blfm import PriorSpec, VariationalPosterior, fit_vi, predict_expected
from .errors import DivergenceError, EmptyDatasetError
from .ingest import RatingsDataset

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    model_tag: str
    K: int
    rmse_test: float | None
    rmse_validation: float | None = None
    gap: float | None = None
    runtime_seconds: float = 0.0
    config_snapshot: dict = field(default_factory=dict)
    error: str | None = None

    def as_dict(self, include_runtime=True):
        d = {
            "model_tag": self.model_tag,
            "K": self.K,
            "rmse_test": self.rmse_test,
            "rmse_validation": self.rmse_validation,
            "gap": self.gap,
            "config_snapshot": self.config_snapshot,
            "error": self.error,
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime_seconds
        return d


@dataclass
class TraceReport:
    entity_kind: str
    entity: int
    dimension: int
    samples: np.ndarray
    sample_mean: float
    variational_mean: float
    variational_std: float
    map_reference: float | None = None

    def header(self):
        return {
            "entity_kind": self.entity_kind,
            "entity": self.entity,
            "dimension": self.dimension,
            "n_samples": len(self.samples),
            "sample_mean": self.sample_mean,
            "variational_mean": self.variational_mean,
            "variational_std": self.variational_std,
            "map_reference": self.map_reference,
        }


def _as_arrays(interactions):
    if isinstance(interactions, RatingsDataset):
        return interactions.users, interactions.items, interactions.ratings
    rows = list(interactions)
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    u, i, r, *_ = zip(*rows)
    return np.asarray(u, np.int64), np.asarray(i, np.int64), np.asarray(r, float)


def rmse(predict, interactions):
    """Root mean squared error of ``predict(users, items)`` over ``interactions``.

    ``predict`` receives index arrays and must return an array of predictions.
    """
    users, items, ratings = _as_arrays(interactions)
    if len(ratings) == 0:
        raise EmptyDatasetError("cannot compute RMSE of an empty interaction list")
    err = ratings - np.asarray(predict(users, items), dtype=float)
    return math.sqrt(float(err @ err) / len(ratings))


def overfit_gap(predict, validation, test):
    """Return ``(rmse_validation, rmse_test, gap)`` with ``gap = test - validation``."""
    rv = rmse(predict, validation)
    rt = rmse(predict, test)
    return rv, rt, rt - rv


def predictor(model, mode="analytic", n_samples=2000, seed=0, clamp=None):
    """Wrap a model as a ``predict(users, items)`` callable."""
    if isinstance(model, VariationalPosterior):
        return lambda u, i: predict_expected(model, u, i, mode=mode, n_samples=n_samples,
                                             seed=seed, clamp=clamp)
    if isinstance(model, FactorModel):
        return lambda u, i: model.predict(u, i, clamp=clamp)
    raise TypeError(f"no predictor for {type(model).__name__}")


def constant_predictor(value):
    return lambda u, i: np.full(len(np.atleast_1d(u)), float(value))


def trace_parameter(post, entity_kind, entity, dimension, n_samples, seed, map_model=None):
    """Draw ``n_samples`` values of one latent factor scalar from its variational Gaussian."""
    if entity_kind not in ("user", "item"):
        raise ValueError("entity_kind must be 'user' or 'item'")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    means, logstds = (post.P_mean, post.P_logstd) if entity_kind == "user" else (post.Q_mean, post.Q_logstd)
    if not 0 <= entity < means.shape[0]:
        raise IndexError(f"{entity_kind} {entity} out of bounds ({means.shape[0]})")
    if not 0 <= dimension < post.K:
        raise IndexError(f"dimension {dimension} out of bounds (K={post.K})")
    mu = float(means[entity, dimension])
    sd = float(np.exp(logstds[entity, dimension]))
    rng = np.random.default_rng(seed)
    samples = mu + sd * rng.standard_normal(n_samples)
    ref = None
    if map_model is not None:
        table = map_model.P if entity_kind == "user" else map_model.Q
        ref = float(table[entity, dimension])
    return TraceReport(entity_kind, int(entity), int(dimension), samples,
                       float(np.mean(samples)), mu, sd, ref)


def _sweep_key(cfg):
    return (cfg.K, cfg.iterations)


def run_vi(train, test, cfg, prior, validation=None, mode="monte-carlo", clamp=None, tag=None):
    """Fit one VI configuration and evaluate it; divergence is recorded, not raised."""
    tag = tag or ("blfmbias" if cfg.with_bias else "blfm")
    snapshot = {"vi": cfg.as_dict(), "prior": prior.as_dict(), "prediction": mode,
                "clamp": list(clamp) if clamp else None}
    start = time.perf_counter()
    try:
        fit = fit_vi(train, cfg, prior)
    except DivergenceError as exc:
        return EvalReport(tag, cfg.K, None, runtime_seconds=time.perf_counter() - start,
                          config_snapshot=snapshot, error=str(exc))
    pred = predictor(fit.posterior, mode=mode, n_samples=cfg.mc_samples, seed=cfg.seed, clamp=clamp)
    rt = rmse(pred, test)
    rv = gap = None
    if validation is not None:
        rv = rmse(pred, validation)
        gap = rt - rv
    return EvalReport(tag, cfg.K, rt, rv, gap, time.perf_counter() - start, snapshot)


def sweep(train, test, grid, prior=None, validation=None, mode="monte-carlo", clamp=None):
    """Train and evaluate each configuration independently; reports sorted by (K, iterations).

    Each configuration uses only its own ``seed``, so runs are isolated and
    the result does not depend on grid order.
    """
    if not grid:
        raise ValueError("sweep grid is empty")
    if prior is None:
        prior = PriorSpec.from_mean_rating(train.r_mean)
    ordered = sorted(grid, key=_sweep_key)
    reports = []
    for cfg in ordered:
        logger.info("sweep: K=%d iterations=%d mc_samples=%d", cfg.K, cfg.iterations, cfg.mc_samples)
        reports.append(run_vi(train, test, cfg, prior, validation, mode, clamp))
    return reports


def grid_from_json(spec, base=None):
    """Expand ``{"K": [8, 16], "iterations": [...], ...}`` into a list of configs.

    Keys map to :class:`~bayeslfm.blfm.ViConfig` fields; scalars are broadcast.
    A list of dicts is also accepted, one config per entry.
    """
    from itertools import product

    from .blfm import ViConfig

    base = base or ViConfig()
    if isinstance(spec, list):
        return [replace(base, **entry) for entry in spec]
    keys = sorted(spec)
    values = [v if isinstance(v, list) else [v] for v in (spec[k] for k in keys)]
    return [replace(base, **dict(zip(keys, combo))) for combo in product(*values)]


REPORT_FIELDS = ("model_tag", "K", "rmse_test", "rmse_validation", "gap", "error")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_reports(reports, directory, stem="report", extra=None):
    """Write ``<stem>.csv`` and ``<stem>.json``; wall-clock goes to ``<stem>.timing.json``.

    Runtimes are kept out of the main files so that reruns with the same seeds
    produce byte-identical reports.
    """
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{stem}.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for rep in reports:
            writer.writerow([_fmt(getattr(rep, f)) for f in REPORT_FIELDS])
    payload = {"reports": [r.as_dict(include_runtime=False) for r in reports]}
    if extra:
        payload.update(extra)
    with open(os.path.join(directory, f"{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, f"{stem}.timing.json"), "w", encoding="utf-8") as fh:
        json.dump([{"model_tag": r.model_tag, "K": r.K, "runtime_seconds": r.runtime_seconds}
                   for r in reports], fh, indent=2)
        fh.write("\n")


def write_trace(report, directory, stem="trace", extra=None):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{stem}.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("sample_index", "value"))
        for k, v in enumerate(report.samples.tolist()):
            writer.writerow((k, repr(v)))
    header = report.header()
    if extra:
        header.update(extra)
    with open(os.path.join(directory, f"{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_elbo_trace(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "elbo"))
        for it, value in trace:
            writer.writerow((it, repr(value)))
