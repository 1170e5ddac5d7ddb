"""Command-line pipeline: ingest -> split -> train -> eval, plus sweep and trace.

Exit codes: 0 ok, 2 input error, 3 divergence, 4 shape mismatch.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import checkpoint
from .baselines import PMF_DEFAULTS, SVD_DEFAULTS, SgdConfig, train_pmf, train_svd, train_svd_bias
from .blfm import PriorSpec, VariationalPosterior, ViConfig, fit_vi
from .errors import BlfmError, DivergenceError, ShapeMismatchError
from .evaluate import (
    EvalReport, grid_from_json, overfit_gap, predictor, rmse, sweep, trace_parameter,
    write_elbo_trace, write_reports, write_trace,
)
from .ingest import (
    dataset_stats, format_stats, load_movielens, read_canonical, write_canonical, write_stats_json,
)
from .seeding import derive_seed
from .split import leave_latest_out, read_split, sample_validation, write_split

logger = logging.getLogger("bayeslfm")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGENCE, EXIT_SHAPE = 0, 2, 3, 4
REPORT_DIR_ENV = "BAYESLFM_REPORT_DIR"

MODELS = ("svd", "svdbias", "pmf", "blfm", "blfmbias")
MODEL_DEFAULTS = {
    "svd": SVD_DEFAULTS,
    "svdbias": SVD_DEFAULTS,
    "pmf": PMF_DEFAULTS,
}
VI_DEFAULTS = dict(iterations=10000, step_size=0.01, mc_samples=2000)


def _out_dir(args):
    return os.environ.get(REPORT_DIR_ENV) or args.out


PATH_ARGS = ("input", "data", "out", "checkpoint", "map_checkpoint", "grid")


def _snapshot(args):
    """Arguments as a JSON-able record; paths reduced to basenames so reruns elsewhere match."""
    snap = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if key in PATH_ARGS and value is not None:
            value = os.path.basename(os.path.normpath(value))
        snap[key] = value
    return snap


def cmd_ingest(args):
    ds = load_movielens(args.input)
    stats = dataset_stats(ds)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "dataset.csv"), "w", encoding="utf-8", newline="") as fh:
        write_canonical(ds, fh)
    with open(os.path.join(out, "stats.json"), "w", encoding="utf-8") as fh:
        write_stats_json(stats, fh, extra={"config": {"input": os.path.basename(args.input)}})
    print(format_stats(stats))
    return EXIT_OK


def _load_any(path):
    """A MovieLens ``::`` file or a canonical ``dataset.csv`` (file or directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.csv")
    if path.endswith(".csv"):
        with open(path, encoding="utf-8", newline="") as fh:
            return read_canonical(fh)
    return load_movielens(path)


def cmd_split(args):
    ds = _load_any(args.data)
    result = leave_latest_out(ds)
    out = _out_dir(args)
    write_split(result, out, ds, seed=args.seed, config=_snapshot(args))
    size = args.validation_size if args.validation_size is not None else len(result.test)
    val_seed = derive_seed(args.seed, "validation")
    validation = sample_validation(result.train, size, val_seed)
    with open(os.path.join(out, "validation.csv"), "w", encoding="utf-8", newline="") as fh:
        write_canonical(validation, fh)
    print(f"train={len(result.train)} test={len(result.test)} validation={len(validation)} "
          f"protocol={result.protocol_tag}")
    return EXIT_OK


def _read_validation(split_dir, like):
    path = os.path.join(split_dir, "validation.csv")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8", newline="") as fh:
        return read_canonical(fh, index_from=like)


def _prior(args, train):
    base = PriorSpec.from_mean_rating(train.r_mean)
    overrides = {}
    if args.prior_var is not None:
        overrides["factor_var"] = args.prior_var
    if args.bias_var is not None:
        overrides["bias_var"] = args.bias_var
    if args.noise_var is not None:
        overrides["noise_var"] = args.noise_var
    return replace(base, **overrides)


def _vi_config(args, with_bias, seed):
    return ViConfig(
        K=args.k,
        iterations=args.iters if args.iters is not None else VI_DEFAULTS["iterations"],
        step_size=args.step_size if args.step_size is not None else VI_DEFAULTS["step_size"],
        mc_samples=args.samples if args.samples is not None else VI_DEFAULTS["mc_samples"],
        seed=seed,
        with_bias=with_bias,
        eval_every=args.eval_every,
    )


def _sgd_config(args, seed):
    d = MODEL_DEFAULTS[args.model]
    return SgdConfig(
        K=args.k,
        learning_rate=args.lr if args.lr is not None else d["learning_rate"],
        regularization=args.reg if args.reg is not None else d["regularization"],
        momentum=args.momentum if args.momentum is not None else d["momentum"],
        epochs=args.iters if args.iters is not None else d["epochs"],
        seed=seed,
    )


def cmd_train(args):
    split, _ = read_split(args.data)
    train = split.train
    seed = derive_seed(args.seed, "train")
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    meta = {"run_config": _snapshot(args)}

    if args.model in ("blfm", "blfmbias"):
        cfg = _vi_config(args, args.model == "blfmbias", seed)
        fit = fit_vi(train, cfg, _prior(args, train))
        checkpoint.save(fit.posterior, os.path.join(out, "checkpoint.json"), meta=meta)
        write_elbo_trace(fit.trace, os.path.join(out, "trace.csv"))
        print(f"model={args.model} K={cfg.K} iterations={fit.trace[-1][0]} "
              f"final_elbo={fit.trace[-1][1]:.6f}")
        return EXIT_OK

    cfg = _sgd_config(args, seed)
    trainer = {"svd": train_svd, "svdbias": train_svd_bias, "pmf": train_pmf}[args.model]
    model = trainer(train, cfg)
    checkpoint.save(model, os.path.join(out, "checkpoint.json"), meta=meta)
    with open(os.path.join(out, "trace.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(model.loss_history, start=1):
            fh.write(f"{epoch},{loss!r}\n")
    print(f"model={args.model} K={cfg.K} epochs={cfg.epochs} final_loss={model.loss_history[-1]:.6f}")
    return EXIT_OK


def _clamp(args, train):
    return (train.r_min, train.r_max) if args.clamp else None


def cmd_eval(args):
    split, _ = read_split(args.data)
    model = checkpoint.load(args.checkpoint)
    checkpoint.check_shape(model, split.train)
    if args.k is not None and args.k != model.K:
        raise ShapeMismatchError(f"checkpoint has K={model.K}, expected {args.k}")
    target = split.train if args.on == "train" else split.test
    pred = predictor(model, mode=args.mode, n_samples=args.samples,
                     seed=derive_seed(args.seed, "predict"), clamp=_clamp(args, split.train))
    validation = _read_validation(args.data, split.train)
    tag = model.meta.get("model", "model")
    if validation is not None and args.on == "test":
        rv, rt, gap = overfit_gap(pred, validation, target)
    else:
        rv = gap = None
        rt = rmse(pred, target)
    report = EvalReport(tag, model.K, rt, rv, gap, config_snapshot=_snapshot(args))
    write_reports([report], _out_dir(args), stem="eval")
    line = f"model={tag} K={model.K} rmse_{args.on}={rt:.6f}"
    if gap is not None:
        line += f" rmse_validation={rv:.6f} gap={gap:.6f}"
    print(line)
    return EXIT_OK


def cmd_sweep(args):
    split, _ = read_split(args.data)
    with open(args.grid, encoding="utf-8") as fh:
        spec = json.load(fh)
    base = ViConfig(seed=derive_seed(args.seed, "sweep"), with_bias=args.with_bias,
                    **VI_DEFAULTS)
    grid = grid_from_json(spec, base=base)
    validation = _read_validation(args.data, split.train)
    prior = _prior(args, split.train)
    reports = sweep(split.train, split.test, grid, prior=prior, validation=validation,
                    mode=args.mode, clamp=_clamp(args, split.train))
    write_reports(reports, _out_dir(args), stem="sweep", extra={"config": _snapshot(args)})
    for rep in reports:
        if rep.error:
            print(f"K={rep.K} error={rep.error}")
        else:
            line = f"K={rep.K} rmse_test={rep.rmse_test:.6f}"
            if rep.gap is not None:
                line += f" gap={rep.gap:.6f}"
            print(line)
    return EXIT_OK


def cmd_trace(args):
    post = checkpoint.load(args.checkpoint)
    if not isinstance(post, VariationalPosterior):
        print("trace needs a variational posterior checkpoint", file=sys.stderr)
        return EXIT_INPUT
    map_model = checkpoint.load(args.map_checkpoint) if args.map_checkpoint else None
    if map_model is not None and (map_model.K != post.K or map_model.m != post.m or map_model.n != post.n):
        raise ShapeMismatchError("MAP checkpoint shape differs from posterior")
    report = trace_parameter(post, args.entity_kind, args.entity, args.dim, args.samples,
                             derive_seed(args.seed, "trace"), map_model)
    write_trace(report, _out_dir(args), extra={"config": _snapshot(args)})
    line = (f"{args.entity_kind}={args.entity} dim={args.dim} sample_mean={report.sample_mean:.6f} "
            f"variational_mean={report.variational_mean:.6f}")
    if report.map_reference is not None:
        line += f" map={report.map_reference:.6f}"
    print(line)
    return EXIT_OK


def _add_prior_flags(p):
    p.add_argument("--prior-var", type=float, default=None,
                   help="factor prior variance (default: train mean rating)")
    p.add_argument("--bias-var", type=float, default=None)
    p.add_argument("--noise-var", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="bayeslfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--config", default=None, help="JSON file whose keys override flags")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="parse a MovieLens ratings file")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="leave-latest-out split plus validation sample")
    p.add_argument("--data", required=True, help="ratings.dat, dataset.csv or ingest directory")
    p.add_argument("--validation-size", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on the split's train set")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--iters", type=int, default=None, help="epochs (MAP) or VI iterations")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--reg", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--samples", type=int, default=None, help="prediction samples (VI)")
    p.add_argument("--eval-every", type=int, default=100)
    _add_prior_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE (and overfit gap) of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--on", choices=("test", "train"), default="test")
    p.add_argument("--mode", choices=("monte-carlo", "analytic"), default="monte-carlo")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--k", type=int, default=None, help="expected K; mismatch exits 4")
    p.add_argument("--clamp", action="store_true", help="clamp predictions to the rating range")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate a grid of VI configurations")
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--grid", required=True, help="JSON grid, e.g. {\"K\": [8, 16, 32, 64]}")
    p.add_argument("--with-bias", action="store_true")
    p.add_argument("--mode", choices=("monte-carlo", "analytic"), default="monte-carlo")
    p.add_argument("--clamp", action="store_true")
    _add_prior_flags(p)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="sample one latent scalar from the posterior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--map-checkpoint", default=None)
    p.add_argument("--entity-kind", choices=("user", "item"), default="user")
    p.add_argument("--entity", type=int, default=100)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--samples", type=int, default=500)
    common(p)
    p.set_defaults(func=cmd_trace)
    return parser


def _apply_config(args, parser):
    if not getattr(args, "config", None):
        return args
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            parser.error(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(args, parser)
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: divergence at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ShapeMismatchError as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (BlfmError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
