"""Command-line entry point: ``dcrf <command> [flags]``.

Exit codes: 0 success, 1 runtime or I/O error, 2 usage error, 3 verification
failure.  Every command emits one JSON run record, to ``--record`` if given
and to stdout otherwise; human-readable summaries go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from dcrf import __version__
from dcrf.core import ConfigurationError
from dcrf.dataio import (DatasetError, ModelFile, SynthConfig, generate_synthetic,
                         load_dataset, load_model, save_dataset, save_model)
from dcrf.kernels import build_kernel_set
from dcrf.learning import (BandwidthGrid, KernelCache, TrainConfig, grid_search_bandwidths,
                           predict, train_all)
from dcrf.meanfield import MeanFieldConfig
from dcrf.metrics import MetricsError, evaluate
from dcrf.oracle import MAX_NODES, run_oracle_check

log = logging.getLogger("dcrf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("DCRF_THREADS", "1")))
    except ValueError:
        return 1


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


# -- commands --------------------------------------------------------------

def cmd_gen(args, record: dict) -> int:
    cfg = SynthConfig(n=args.n, n_categories=args.categories, dim_image=args.dim_image,
                      dim_text=args.dim_text, n_clusters=args.clusters,
                      informativeness=(args.info_text, args.info_set, args.info_group),
                      label_noise=args.noise, seed=args.seed,
                      train_fraction=args.train_fraction,
                      validation_fraction=args.validation_fraction)
    bundle = generate_synthetic(cfg)
    manifest = save_dataset(bundle, args.out, overwrite=args.overwrite)
    record["outputs"] = [str(manifest)]
    record["metrics"] = {"n": bundle.n, "categories": bundle.n_categories,
                         "positives": [int(v) for v in bundle.labels.sum(axis=0)]}
    print(f"wrote {bundle.n} nodes x {bundle.n_categories} categories to {manifest}",
          file=sys.stderr)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, epochs=args.epochs, unroll_T=args.unroll,
                       reg_lambda=args.reg_lambda, seed=args.seed,
                       transductive=args.transductive, damping=args.damping,
                       l2_squared=not args.l2_unsquared, ranking_hinge=args.ranking_hinge,
                       unary_only=args.unary_only)


def cmd_train(args, record: dict) -> int:
    bundle = load_dataset(args.data)
    config = _train_config(args)
    metrics: dict = {}
    if args.grid_search:
        grid = BandwidthGrid(args.grid_text, args.grid_set, args.grid_group, args.grid_metric)
        search_cfg = TrainConfig(**{**config.__dict__, "epochs": args.grid_epochs})
        cache = KernelCache(bundle, args.threads)
        result = grid_search_bandwidths(bundle, grid, search_cfg, cache=cache)
        thetas = result.best
        metrics["grid_evaluations"] = [{"thetas": list(t), "score": s}
                                       for t, s in result.evaluations]
        for t, s in result.evaluations:
            print(f"grid {t}: {grid.metric} = {_fmt(s)}", file=sys.stderr)
        kernels = cache.kernels(thetas)
    else:
        thetas = (args.theta_text, args.theta_set, args.theta_group)
        kernels = build_kernel_set(bundle.text_embeddings, bundle.sets, bundle.groups, thetas,
                                   args.threads)
    results = train_all(bundle, kernels, config)
    model = ModelFile(bundle.categories, tuple(r.params for r in results), thetas, config.unroll_T)
    save_model(model, args.out_model)
    metrics["thetas"] = list(thetas)
    metrics["per_category"] = {
        name: {"final_train_loss": r.final_train_loss, "final_val_loss": r.final_val_loss,
               "best_epoch": r.best_epoch, "degenerate": r.degenerate}
        for name, r in zip(bundle.categories, results)}
    record["metrics"] = metrics
    record["outputs"] = [str(args.out_model)]
    for name, r in zip(bundle.categories, results):
        print(f"{name}: train loss {_fmt(r.final_train_loss)}, val loss {_fmt(r.final_val_loss)}, "
              f"best epoch {r.best_epoch}", file=sys.stderr)
    return EXIT_OK


def _load_compatible(args):
    bundle = load_dataset(args.data)
    model = load_model(args.model)
    if len(model.categories) != bundle.n_categories:
        raise ConfigurationError(
            f"model has {len(model.categories)} categories, dataset has {bundle.n_categories}")
    dim = bundle.image_features.shape[1]
    if any(p.dim != dim for p in model.params):
        raise ConfigurationError(
            f"model feature dimension {model.params[0].dim} != dataset dimension {dim}")
    return bundle, model


def cmd_infer(args, record: dict) -> int:
    bundle, model = _load_compatible(args)
    kernels = build_kernel_set(bundle.text_embeddings, bundle.sets, bundle.groups,
                               model.thetas, args.threads)
    mf = MeanFieldConfig(max_iters=model.unroll_T, convergence_tol=0.0)
    pred = predict(bundle.image_features, kernels, model.params, mf, bundle.n_categories)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for i, node_id in enumerate(bundle.ids):
            fh.write(json.dumps({"id": node_id,
                                 "marginals": [float(v) for v in pred.marginals[i]],
                                 "labels": [int(v) for v in pred.labels[i]]}) + "\n")
    record["outputs"] = [str(out)]
    record["metrics"] = {"rows": bundle.n, "positive_rate": float(pred.labels.mean())}
    print(f"wrote {bundle.n} predictions to {out}", file=sys.stderr)
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, list[float]]:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                preds[row["id"]] = row["marginals"]
    return preds


def cmd_eval(args, record: dict) -> int:
    bundle = load_dataset(args.data)
    preds = _read_predictions(Path(args.predictions))
    mask = bundle.labeled.copy()
    if args.split != "all":
        mask &= bundle.split_mask(args.split)
    idx = np.flatnonzero(mask)
    wanted = [bundle.ids[i] for i in idx]
    missing = [i for i in wanted if i not in preds]
    extra = set(preds) - set(bundle.ids)
    if missing or extra:
        example = missing[0] if missing else sorted(extra)[0]
        raise DatasetError(f"prediction ids do not match the dataset ({len(missing)} missing, "
                           f"{len(extra)} unknown; e.g. {example!r})")
    scores = np.array([preds[i] for i in wanted], dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != bundle.n_categories:
        raise DatasetError(f"predictions have shape {scores.shape}, expected "
                           f"({len(wanted)}, {bundle.n_categories})")
    report = evaluate(scores, bundle.labels[idx], bundle.categories)
    doc = report.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        record["outputs"] = [str(args.out)]
    record["metrics"] = doc
    print(f"macro AP {_fmt(report.macro_ap)}  recall {_fmt(report.macro_recall)}  "
          f"precision {_fmt(report.macro_precision)}  accuracy {_fmt(report.macro_accuracy)}",
          file=sys.stderr)
    return EXIT_OK


def cmd_oracle_check(args, record: dict) -> int:
    if not 1 <= args.n <= MAX_NODES:
        raise UsageError(f"--n must lie in [1, {MAX_NODES}] (exact enumeration cap); got {args.n}")
    rep = run_oracle_check(args.n, args.trials, args.seed, args.coupling, args.strong_coupling,
                           args.iters, args.max_gap)
    record["metrics"] = {
        "trials": rep.trials, "passed": rep.passed, "max_gap": rep.max_gap,
        "failing_seeds": rep.failing_seeds, "non_monotone_seeds": rep.non_monotone_seeds,
        "mean_kl_meanfield": float(np.mean(rep.kl_meanfield)),
        "mean_kl_uniform": float(np.mean(rep.kl_uniform)),
    }
    print(f"{rep.passed}/{rep.trials} within gap {_fmt(args.max_gap)}; max gap "
          f"{_fmt(rep.max_gap)}; monotonicity violations {len(rep.non_monotone_seeds)}",
          file=sys.stderr)
    if not rep.ok(args.min_pass):
        bad = (rep.failing_seeds + rep.non_monotone_seeds)[0]
        raise VerificationFailure(f"oracle check failed; replay with --seed {bad} --trials 1")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker threads (default $DCRF_THREADS or 1); 1 is bit-reproducible")
    p.add_argument("--record", help="write the JSON run record here instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_train_flags(p: argparse.ArgumentParser, grid_default: bool) -> None:
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out-model", required=True, help="model file to write")
    p.add_argument("--theta-text", type=float, default=4.0)
    p.add_argument("--theta-set", type=float, default=0.1)
    p.add_argument("--theta-group", type=float, default=0.1)
    p.add_argument("--grid-search", action="store_true", default=grid_default,
                   help="choose bandwidths by grid search on the validation split")
    p.add_argument("--grid-text", type=_floats, default=(1.0, 4.0, 16.0))
    p.add_argument("--grid-set", type=_floats, default=(0.05, 0.1, 0.3))
    p.add_argument("--grid-group", type=_floats, default=(0.05, 0.1, 0.3))
    p.add_argument("--grid-metric", choices=("macro_ap", "loss"), default="macro_ap")
    p.add_argument("--grid-epochs", type=int, default=10, help="epochs per grid candidate")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--unroll", type=int, default=5, help="mean-field steps T")
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=0.1,
                   help="L2 weight on the unary weights")
    p.add_argument("--lr", type=float, default=0.1, help="RMSProp learning rate")
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--transductive", dest="transductive", action="store_true", default=True,
                      help="message passing over all nodes (default)")
    mode.add_argument("--inductive", dest="transductive", action="store_false",
                      help="train on the training-node subgraph only")
    p.add_argument("--unary-only", action="store_true", help="freeze kernel weights at 0")
    p.add_argument("--l2-unsquared", action="store_true", help="use lambda*|w_A| instead of squared")
    p.add_argument("--ranking-hinge", action="store_true", help="hinge the ranking terms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcrf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dcrf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim-image", type=int, default=16)
    p.add_argument("--dim-text", type=int, default=16)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--info-text", type=float, default=0.7)
    p.add_argument("--info-set", type=float, default=0.7)
    p.add_argument("--info-group", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=0.1, help="label flip rate")
    p.add_argument("--train-fraction", type=float, default=2 / 3)
    p.add_argument("--validation-fraction", type=float, default=1 / 12)
    p.add_argument("--overwrite", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one CRF per category")
    _add_train_flags(p, grid_default=False)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="train after a bandwidth grid search")
    _add_train_flags(p, grid_default=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write per-node marginals and labels")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output JSONL")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--out", help="report JSON")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check", help="compare mean-field with exact enumeration")
    p.add_argument("--n", type=int, default=10, help=f"max nodes per instance (<= {MAX_NODES})")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coupling", type=float, default=0.1, help="max |kernel weight|, gap check")
    p.add_argument("--strong-coupling", type=float, default=2.0,
                   help="max |kernel weight| for the monotonicity check")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--max-gap", type=float, default=0.05)
    p.add_argument("--min-pass", type=float, default=0.95, help="required passing fraction")
    _add_common(p)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in vars(args).items() if k not in ("func", "record", "verbose")}
    record = {"command": args.command, "config": config, "seed": getattr(args, "seed", None),
              "version": __version__, "outputs": [], "metrics": None, "status": "ok"}
    start = time.perf_counter()
    code = EXIT_OK
    try:
        with _thread_limit(args.threads):
            code = args.func(args, record)
    except UsageError as exc:
        code, record["status"], record["error"] = EXIT_USAGE, "usage-error", str(exc)
        parser.print_usage(sys.stderr)
        print(f"dcrf: error: {exc}", file=sys.stderr)
    except VerificationFailure as exc:
        code, record["status"], record["error"] = EXIT_VERIFY, "verification-failed", str(exc)
        print(f"dcrf: {exc}", file=sys.stderr)
    except (DatasetError, ConfigurationError, MetricsError, OSError, ValueError) as exc:
        code, record["status"], record["error"] = EXIT_RUNTIME, "error", str(exc)
        print(f"dcrf: error: {exc}", file=sys.stderr)
    record["duration_s"] = time.perf_counter() - start
    text = json.dumps(_nan_to_none(record), sort_keys=True, default=_json_default)
    if args.record:
        Path(args.record).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return code


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _nan_to_none(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_nan_to_none(v) for v in o]
    return o


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
