"""Command-line interface: ``shapinfer {estimate,learn-curve,simulate,coverage}``.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid data,
4 numerical failure. Logging verbosity comes from ``SHAPINFER_LOG``
(``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .core_data import DataError, load_dataset
from .curve import FitProtocol, fit_shap_curve
from .gaussian import ModelError
from .inference import EstimationError, PowerConfig, estimate_power, estimates_to_csv
from .learners import FitError, LearnerConfig
from .shap import SubsetStrategy
from .simulation import BENCHMARK_LEARNER, METHODS, coverage_to_json, run_coverage_study, run_curve_experiment

log = logging.getLogger("shapinfer")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NUMERIC_ERRORS = (EstimationError, FitError, ModelError, FloatingPointError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


def _configure_logging():
    level = os.environ.get("SHAPINFER_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# flag parsing helpers


def _subsets(value: str, seed: int) -> SubsetStrategy | None:
    if value in (None, "auto"):
        return None
    if value == "exact":
        return SubsetStrategy("exact", seed=seed)
    try:
        k = int(value)
    except ValueError:
        raise UsageError(f"--subsets must be 'exact' or a positive integer, got {value!r}") from None
    if k < 1:
        raise UsageError("--subsets must be positive")
    return SubsetStrategy("sampled", k, seed)


def _pairs(value):
    if value in ("all", "auto"):
        return value
    try:
        k = int(value)
    except ValueError:
        raise UsageError(f"--pairs must be 'all', 'auto' or a positive integer, got {value!r}") from None
    if k < 1:
        raise UsageError("--pairs must be positive")
    return k


def _features(value, d: int | None = None) -> list[int]:
    """One-based, comma-separated feature list to zero-based indices."""
    try:
        feats = [int(v) - 1 for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--feature must be one-based integers, got {value!r}") from None
    if not feats or any(f < 0 for f in feats) or (d is not None and any(f >= d for f in feats)):
        raise UsageError(f"--feature {value!r} out of range" + (f" for d={d}" if d else ""))
    return feats


def _int_list(value, name):
    try:
        out = [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name} must be comma-separated integers, got {value!r}") from None
    if not out:
        raise UsageError(f"{name} is empty")
    return out


def _learner(args, bandwidth: float = 1.0) -> LearnerConfig:
    kw = {"kind": args.learner}
    if args.learner == "feedforward":
        kw.update(hidden=tuple(_int_list(args.hidden, "--hidden")), epochs=args.epochs)
    if args.learner == "ridge_rff":
        kw.update(n_features=args.features, bandwidth=bandwidth if args.bandwidth is None else args.bandwidth)
    if args.ridge is not None:
        kw["ridge"] = args.ridge
    elif args.learner == "linear":
        kw["ridge"] = 1e-8
    try:
        return LearnerConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
        return
    with open(path, "w", newline="") as fh:
        fh.write(text if text.endswith("\n") else text + "\n")


def _require(args, parser, *names):
    for name in names:
        if getattr(args, name, None) is None:
            parser.error(f"the following argument is required: --{name.replace('_', '-')}")


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(args, parser) -> int:
    _require(args, parser, "data", "feature")
    data = load_dataset(args.data)
    feats = _features(args.feature, data.d)
    if args.p < 1:
        raise UsageError("--p must be at least 1")
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    learner = _learner(args)
    config = PowerConfig(curve_learner=learner, curve_loss=args.loss, protocol=FitProtocol(args.protocol),
                         delta=args.delta, beta_scale=args.beta_scale, clip_floor=args.clip_floor,
                         alpha_level=args.alpha, subsets=_subsets(args.subsets, args.seed),
                         pair_budget=_pairs(args.pairs), k_conditional=args.k_conditional, seed=args.seed)
    log.info("resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    estimates = []
    for a in feats:
        # one independent stream per feature, so results do not depend on list order
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, a]))
        estimates.append(estimate_power(data, a, args.p, config, rng))
    if args.format == "csv":
        _write(args.out, estimates_to_csv(estimates))
    elif len(estimates) == 1:
        _write(args.out, estimates[0].to_json())
    else:
        _write(args.out, json.dumps([e.to_dict() for e in estimates], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_learn_curve(args, parser) -> int:
    _require(args, parser, "data", "feature")
    data = load_dataset(args.data)
    (a,) = _features(args.feature, data.d)[:1]
    learner = _learner(args)
    strat = _subsets(args.subsets, args.seed) or SubsetStrategy.auto(data.d, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    diag: dict = {}
    log.info("resolved config: %s", json.dumps({"learner": learner.kind, "loss": args.loss,
                                                 "protocol": args.protocol, "seed": args.seed}, sort_keys=True))
    model = fit_shap_curve(data, a, learner, None, args.loss, FitProtocol(args.protocol), strat, rng,
                           pairs_per_row=args.pairs_per_row, diagnostics=diag)
    _write(args.out, json.dumps(model.to_dict(), sort_keys=True))
    if args.diagnostics:
        diag.pop("mu", None)
        _write(args.diagnostics, json.dumps(diag, indent=2, sort_keys=True))
    if args.eval_points:
        points = _load_points(args.eval_points, data.d)
        preds = model.predict(points)
        rows = [[*map(repr, map(float, p)), repr(float(v))] for p, v in zip(points, preds)]
        header = [f"x{j + 1}" for j in range(data.d)] + ["phi"]
        target = args.eval_out or (os.path.splitext(args.out)[0] + "_eval.csv" if args.out not in (None, "-") else "-")
        _write(target, "\n".join([",".join(header)] + [",".join(r) for r in rows]))
    return EXIT_OK


def _load_points(path, d: int) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols = [i for i, name in enumerate(header) if name.strip().lower().startswith("x")]
            if len(cols) != d:
                raise DataError(f"{path}: expected {d} covariate columns, found {len(cols)}")
            pts = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    pts.append([float(row[i]) for i in cols])
                except (ValueError, IndexError):
                    raise DataError(f"{path}: row {lineno} is not numeric") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not pts:
        raise DataError(f"{path}: no evaluation points")
    return np.asarray(pts)


def _methods(value):
    if value == "all":
        return list(METHODS)
    out = []
    for item in value.split(","):
        parts = item.strip().replace("/", "_").split("_")
        if len(parts) != 2 or tuple(parts) not in METHODS:
            raise UsageError(f"unknown method {item!r}; use all or e.g. orthogonal_reuse,naive_split")
        out.append(tuple(parts))
    return out


def cmd_simulate(args, parser) -> int:
    n_grid = _int_list(args.n, "--n")
    if any(n < 4 for n in n_grid):
        raise UsageError("--n values must be at least 4")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    methods = _methods(args.methods)
    learner = replace(BENCHMARK_LEARNER, epochs=args.epochs)
    log.info("resolved config: %s", json.dumps({"n": n_grid, "seeds": args.seeds, "methods": methods,
                                                 "epochs": args.epochs, "seed": args.seed}))
    out = args.out if args.out not in (None, "-") else None
    rows = run_curve_experiment(n_grid, args.seeds, methods, out, learner, master_seed=args.seed, jobs=args.jobs,
                                record_runtime=args.record_runtime, oracle_m=args.oracle_m)
    if out is None:
        from .simulation import grid_to_csv
        _write("-", grid_to_csv(rows, args.record_runtime))
    return EXIT_OK


def cmd_coverage(args, parser) -> int:
    if args.reps < 1 or args.n < 4:
        raise UsageError("--reps must be positive and --n at least 4")
    (a,) = _features(args.feature)[:1]
    dgp = {"linear": "linear_gaussian", "linear_gaussian": "linear_gaussian",
           "nonlinear": "nonlinear"}.get(args.dgp)
    if dgp is None:
        raise UsageError(f"unknown --dgp {args.dgp!r}")
    if dgp == "linear_gaussian":
        learner = LearnerConfig(kind="linear", ridge=1e-8)
    else:
        learner = _learner(args, bandwidth=2.0)
    config = PowerConfig(curve_learner=learner, protocol=FitProtocol(args.protocol), delta=args.delta,
                         beta_scale=args.beta_scale, clip_floor=args.clip_floor,
                         subsets=_subsets(args.subsets, args.seed), pair_budget=_pairs(args.pairs),
                         k_conditional=args.k_conditional, seed=args.seed)
    report = run_coverage_study(dgp, args.p, a, args.n, args.reps, args.alpha, config, args.seed, args.jobs)
    _write(args.out, coverage_to_json(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes; results do not depend on it")
    common.add_argument("--out", default=None, help="output path (default stdout)")
    common.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--learner", choices=("ridge_rff", "feedforward", "linear"), default="ridge_rff")
    fitting.add_argument("--features", type=int, default=300, help="random features for ridge_rff")
    fitting.add_argument("--bandwidth", type=float, default=None,
                         help="random-feature lengthscale (default 1.0; 2.0 for coverage --dgp nonlinear)")
    fitting.add_argument("--ridge", type=float, default=None)
    fitting.add_argument("--hidden", default="128,128,128")
    fitting.add_argument("--epochs", type=int, default=200)
    fitting.add_argument("--subsets", default="auto", help="exact or number of sampled coalitions")
    fitting.add_argument("--protocol", choices=("split", "reuse"), default="split")

    inference = argparse.ArgumentParser(add_help=False)
    inference.add_argument("--p", type=float, default=2.0)
    inference.add_argument("--alpha", type=float, default=0.05, help="one minus the confidence level")
    inference.add_argument("--delta", type=float, default=1.0, help="margin exponent for the beta schedule")
    inference.add_argument("--beta-scale", type=float, default=1.0, help="constant c in beta_n = c n^r")
    inference.add_argument("--clip-floor", type=float, default=0.01, help="lower bound on the variance")
    inference.add_argument("--pairs", default="auto", help="all, auto, or number of sampled pairs")
    inference.add_argument("--k-conditional", type=int, default=256, help="conditional draws per coalition")

    parser = argparse.ArgumentParser(prog="shapinfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", parents=[common, fitting, inference], help="CI for E|phi_a(X)|^p")
    est.add_argument("--data", help="CSV with header x1..xd,y")
    est.add_argument("--feature", help="one-based feature index (comma-separated for several)")
    est.add_argument("--loss", choices=("naive", "orthogonal"), default="orthogonal")
    est.add_argument("--format", choices=("json", "csv"), default="json")
    est.set_defaults(func=cmd_estimate)

    lc = sub.add_parser("learn-curve", parents=[common, fitting], help="fit the SHAP curve of one feature")
    lc.add_argument("--data")
    lc.add_argument("--feature")
    lc.add_argument("--loss", choices=("naive", "orthogonal"), default="orthogonal")
    lc.add_argument("--pairs-per-row", type=int, default=1)
    lc.add_argument("--eval-points", default=None, help="CSV of points (x1..xd) to evaluate the curve at")
    lc.add_argument("--eval-out", default=None, help="predictions CSV (default: next to --out)")
    lc.add_argument("--diagnostics", default=None, help="training diagnostics JSON path")
    lc.set_defaults(func=cmd_learn_curve)

    sim = sub.add_parser("simulate", parents=[common], help="SHAP-curve accuracy grid on the nonlinear design")
    sim.add_argument("--n", default="500,1000,2000,4000", help="comma-separated sample sizes")
    sim.add_argument("--seeds", type=int, default=4)
    sim.add_argument("--methods", default="all")
    sim.add_argument("--epochs", type=int, default=BENCHMARK_LEARNER.epochs)
    sim.add_argument("--oracle-m", type=int, default=12_000)
    sim.add_argument("--record-runtime", action="store_true", help="fill runtime_s (breaks byte-identical reruns)")
    sim.set_defaults(func=cmd_simulate)

    cov = sub.add_parser("coverage", parents=[common, fitting, inference], help="interval coverage study")
    cov.add_argument("--dgp", default="linear_gaussian", help="linear_gaussian (alias linear) or nonlinear")
    cov.add_argument("--feature", default="1")
    cov.add_argument("--n", type=int, default=2000)
    cov.add_argument("--reps", type=int, default=100)
    cov.set_defaults(func=cmd_coverage)
    return parser


def _apply_config(parser, argv):
    """Load ``--config`` and install its values as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {known.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("--config must hold a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            unknown = set(values) - dests - {"command"}
            if sp.prog.split()[-1] in argv and unknown:
                parser.error(f"unknown keys in --config: {', '.join(sorted(unknown))}")
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv=None) -> int:
    _configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config(parser, argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        print("shapinfer: error: --jobs must be positive", file=sys.stderr)
        return EXIT_ARGS
    try:
        return args.func(args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"shapinfer: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except DataError as exc:
        print(f"shapinfer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        stage = getattr(exc, "stage", type(exc).__name__)
        print(f"shapinfer: numerical failure in {stage}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"shapinfer: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
