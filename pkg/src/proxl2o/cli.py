"""Command-line workflow: gen, train, eval, ablate, check, bench.

Every run echoes its fully-resolved configuration so an experiment can be
reproduced from its log alone.  Exit codes: 0 success, 1 invariant/suite
failure, 2 numeric abort, 64 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evalbench, learned, training
from .densecore import thread_count
from .problems import ProblemFormatError, generate_set, load_problemset
from .training import NumericAbort, TrainConfig

USAGE_EXIT = 64


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _echo_config(name: str, entries: dict) -> None:
    print(f"[{name} config]")
    for key in sorted(entries):
        print(f"{key} = {entries[key]}")


def _read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and #-comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- gen ------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    if args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return USAGE_EXIT
    try:
        ps = generate_set(args.kind, args.count, args.m, args.n, args.sparsity,
                          args.lam, args.seed)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    from .problems import save_problemset

    save_problemset(ps, args.out)
    _echo_config("gen", {"kind": args.kind, "m": args.m, "n": args.n,
                         "sparsity": args.sparsity, "lambda": args.lam,
                         "count": args.count, "seed": args.seed, "out": args.out})
    print(f"wrote {args.count} {args.kind} instances "
          f"({args.m}x{args.n}, sparsity {args.sparsity}, lambda {args.lam}) to {args.out}")
    return 0


# -- train -----------------------------------------------------------------------

_TRAIN_FIELDS = {
    "batch_size": int, "unroll": int, "segments": int, "minibatches": int,
    "meta_lr": float, "clip_norm": float, "seed": int, "kind": str,
    "m": int, "n": int, "sparsity": int, "lam": float, "preset": str,
    "hidden_size": int, "num_layers": int,
}


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        raw = _read_config_file(args.config)
        for key, text in raw.items():
            if key not in _TRAIN_FIELDS:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _TRAIN_FIELDS[key](text)
    for key in _TRAIN_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _cmd_train(args) -> int:
    try:
        cfg = _train_config(args)
    except (ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    _echo_config("train", cfg.to_dict())
    try:
        params, report = training.train(cfg, checkpoint_path=args.out,
                                        log_every=args.log_every)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 2
    print(f"trained preset {cfg.preset} for {cfg.minibatches} minibatches "
          f"in {report.wall_time:.1f}s; final meta-loss {report.losses[-1]:.6e}")
    print(f"checkpoint written to {args.out}")
    return 0


# -- eval ------------------------------------------------------------------------


def _solver_specs(args) -> list[evalbench.SolverSpec]:
    specs = []
    if args.checkpoint:
        params = training.load_checkpoint(args.checkpoint)
        specs.append(evalbench.SolverSpec.from_params(params))
    if args.baselines:
        for name in args.baselines.split(","):
            name = name.strip()
            if not name:
                continue
            if name == "generic":
                if not args.generic_checkpoint:
                    raise ValueError("baseline 'generic' needs --generic-checkpoint")
                gp = training.load_checkpoint(args.generic_checkpoint)
                specs.append(evalbench.SolverSpec.from_params(gp, name="l2o-generic"))
            elif name in ("ista", "fista", "adam", "subgrad"):
                specs.append(evalbench.SolverSpec.baseline(name))
            else:
                raise ValueError(f"unknown baseline {name!r}")
    return specs


def _cmd_eval(args) -> int:
    try:
        testset = load_problemset(args.testset)
        specs = _solver_specs(args)
    except (ProblemFormatError, ValueError, training.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    if not specs:
        print("error: nothing to evaluate (give --checkpoint and/or --baselines)",
              file=sys.stderr)
        return USAGE_EXIT
    if args.checkpoint:
        params = specs[0].params
        trained_kind = (params.meta.get("config") or {}).get("kind")
        if trained_kind and trained_kind != testset.kind:
            print(f"warning: checkpoint was trained on {trained_kind} problems, "
                  f"test set is {testset.kind} (out-of-distribution run)")
    threads = thread_count(args.threads)
    _echo_config("eval", {"testset": args.testset, "checkpoint": args.checkpoint,
                          "baselines": args.baselines, "iters": args.iters,
                          "threads": threads, "seed": testset.seed,
                          "out": args.out})
    report = evalbench.evaluate(specs, testset, args.iters, threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_curves_csv(out / "curves.csv")
    report.write_aggregates_csv(out / "aggregates.csv")
    report.write_runtime_csv(out / "runtime.csv")
    if args.svg:
        report.write_svg(out / "gaps.svg")
    for name in report.solver_names:
        final = report.median_gap[name][-1]
        print(f"{name}: median gap at iter {args.iters} = {final:.3e}")
    print(f"reports written to {out}")
    return 0


# -- ablate ----------------------------------------------------------------------


def _cmd_ablate(args) -> int:
    presets = [p.strip().upper() for p in args.presets.split(",") if p.strip()]
    if not presets:
        print("error: --presets is empty", file=sys.stderr)
        return USAGE_EXIT
    try:
        for p in presets:
            learned.ablation_preset(p)
        cfg = _train_config(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    testset = generate_set(cfg.kind, args.test_count, cfg.m, cfg.n, cfg.sparsity,
                           cfg.lam, args.test_seed)
    _echo_config("ablate", {**cfg.to_dict(), "presets": ",".join(presets),
                            "test_count": args.test_count,
                            "test_seed": args.test_seed, "out": str(out)})
    specs = []
    for preset in presets:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "preset": preset})
        try:
            params, _ = training.train(run_cfg, checkpoint_path=out / f"ckpt_{preset}")
        except NumericAbort as e:
            print(f"numeric abort while training {preset}: {e}", file=sys.stderr)
            return 2
        specs.append(evalbench.SolverSpec.from_params(params, name=f"l2o-{preset.lower()}"))
        print(f"trained preset {preset}")
    threads = thread_count(args.threads)
    report = evalbench.evaluate(specs, testset, args.iters, threads=threads)
    report.write_curves_csv(out / "curves.csv")
    report.write_aggregates_csv(out / "aggregates.csv")
    for name in report.solver_names:
        print(f"{name}: median gap at iter {args.iters} = {report.median_gap[name][-1]:.3e}")
    print(f"combined report written to {out}")
    return 0


# -- check -----------------------------------------------------------------------


def _check_equivalence() -> tuple[bool, list[str]]:
    res = evalbench.equivalence_suite()
    lines = [
        f"fista reduction max deviation   = {res['fista_reduction']:.3e} (tol 1e-10)",
        f"pgd reduction max deviation     = {res['pgd_reduction']:.3e} (tol 1e-14)",
        f"threshold-shift max deviation   = {res['threshold_shift']:.3e} (tol 1e-13)",
    ]
    return bool(res["pass"]), lines


def _check_prox() -> tuple[bool, list[str]]:
    from .checks import prox_oracle_battery

    res = prox_oracle_battery()
    lines = [f"{name:30s} max deviation = {dev:.3e} (tol {tol:g})"
             for name, (dev, tol) in res.items()]
    return all(dev <= tol for dev, tol in res.values()), lines


def _check_gradients() -> tuple[bool, list[str]]:
    from .checks import bptt_gradient_check

    worst = bptt_gradient_check()
    return worst <= 1e-5, [f"unrolled-gradient vs finite differences: "
                           f"worst relative error = {worst:.3e} (tol 1e-5)"]


def _check_theory(checkpoint) -> tuple[bool, list[str]]:
    if not checkpoint:
        raise ValueError("--suite theory needs --checkpoint")
    params = training.load_checkpoint(checkpoint)
    cfg = (params.meta.get("config") or {})
    kind = cfg.get("kind", "lasso")
    m, n = cfg.get("m", 50), cfg.get("n", 100)
    s, lam = cfg.get("sparsity", 20), cfg.get("lam", 0.1)
    testset = generate_set(kind, 16, m, n, s, lam, seed=91)
    lines = []
    ok = True
    residuals = evalbench.fixed_point_residuals(params, testset.problems)
    scaled = [r / (1.0 + float(np.linalg.norm(p.x_star_oracle)))
              for r, p in zip(residuals, testset.problems)]
    worst = max(scaled)
    ok &= worst <= 1e-6
    lines.append(f"fixed-point residual at oracle solutions: worst {worst:.3e} (tol 1e-6)")
    traces = evalbench.trace_coefficients(params, testset, 100)
    for channel in ("b1", "b2"):
        if channel in traces and params.ablation.modes[channel].learnable:
            tr = traces[channel]
            lines.append(f"|{channel}| trace: k=1 {tr[0]:.3e} -> k=50 {tr[49]:.3e}")
    dx = evalbench.step_norm_trace(params, testset, 100)
    lines.append(f"mean |x_k+1 - x_k|: k=1 {dx[0]:.3e} -> k=100 {dx[-1]:.3e}")
    return ok, lines


def _cmd_check(args) -> int:
    suites = {
        "equivalence": lambda: _check_equivalence(),
        "prox": lambda: _check_prox(),
        "gradients": lambda: _check_gradients(),
        "theory": lambda: _check_theory(args.checkpoint),
    }
    if args.suite not in suites:
        print(f"error: unknown suite {args.suite!r}", file=sys.stderr)
        return USAGE_EXIT
    _echo_config("check", {"suite": args.suite, "checkpoint": args.checkpoint})
    try:
        ok, lines = suites[args.suite]()
    except (ValueError, training.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    for line in lines:
        print(line)
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# -- bench -----------------------------------------------------------------------


def _cmd_bench(args) -> int:
    names = [s.strip() for s in args.solvers.split(",") if s.strip()]
    if not names:
        print("error: --solvers is empty", file=sys.stderr)
        return USAGE_EXIT
    try:
        testset = load_problemset(args.testset)
        tolerances = tuple(float(t) for t in args.tolerances.split(","))
        specs = []
        for name in names:
            if name == "learned":
                if not args.checkpoint:
                    raise ValueError("solver 'learned' needs --checkpoint")
                specs.append(evalbench.SolverSpec.from_params(
                    training.load_checkpoint(args.checkpoint)))
            else:
                if name not in ("ista", "fista", "adam", "subgrad"):
                    raise ValueError(f"unknown solver {name!r}")
                specs.append(evalbench.SolverSpec.baseline(name))
    except (ProblemFormatError, ValueError, training.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    threads = thread_count(args.threads)
    _echo_config("bench", {"solvers": ",".join(names), "testset": args.testset,
                           "tolerances": args.tolerances, "cap": args.cap,
                           "threads": threads, "out": args.out})
    report = evalbench.runtime_table(specs, testset, tolerances=tolerances,
                                     cap=args.cap, threads=threads)
    report.write_runtime_csv(args.out)
    with open(args.out) as fh:
        print(fh.read().rstrip())
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> CliParser:
    parser = CliParser(prog="proxl2o",
                       description="Learned proximal-gradient optimizers: data "
                                   "generation, training, evaluation, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic problem set")
    g.add_argument("--kind", choices=["lasso", "logistic"], required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--sparsity", type=int, required=True)
    g.add_argument("--lambda", dest="lam", type=float, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen)

    t = sub.add_parser("train", help="meta-train a learned optimizer")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--preset", dest="preset",
                   choices=sorted(learned.ABLATION_PRESETS), default=None)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--unroll", type=int)
    t.add_argument("--segments", type=int)
    t.add_argument("--minibatches", type=int)
    t.add_argument("--meta-lr", dest="meta_lr", type=float)
    t.add_argument("--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--kind", choices=["lasso", "logistic"])
    t.add_argument("--m", type=int)
    t.add_argument("--n", type=int)
    t.add_argument("--sparsity", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--hidden-size", dest="hidden_size", type=int)
    t.add_argument("--num-layers", dest="num_layers", type=int)
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate solvers on a test set")
    e.add_argument("--testset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--generic-checkpoint", dest="generic_checkpoint")
    e.add_argument("--baselines", default="",
                   help="comma list of ista,fista,adam,subgrad,generic")
    e.add_argument("--iters", type=int, default=100)
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--svg", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="train several presets and compare them")
    a.add_argument("--presets", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--iters", type=int, default=100)
    a.add_argument("--test-count", dest="test_count", type=int, default=64)
    a.add_argument("--test-seed", dest="test_seed", type=int, default=1)
    a.add_argument("--batch-size", dest="batch_size", type=int)
    a.add_argument("--unroll", type=int)
    a.add_argument("--segments", type=int)
    a.add_argument("--minibatches", type=int)
    a.add_argument("--meta-lr", dest="meta_lr", type=float)
    a.add_argument("--clip-norm", dest="clip_norm", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--kind", choices=["lasso", "logistic"])
    a.add_argument("--m", type=int)
    a.add_argument("--n", type=int)
    a.add_argument("--sparsity", type=int)
    a.add_argument("--lambda", dest="lam", type=float)
    a.add_argument("--threads", type=int, default=None)
    a.set_defaults(fn=_cmd_ablate, preset=None, hidden_size=None, num_layers=None)

    c = sub.add_parser("check", help="run an invariant suite")
    c.add_argument("--suite", required=True,
                   choices=["equivalence", "gradients", "prox", "theory"])
    c.add_argument("--checkpoint")
    c.set_defaults(fn=_cmd_check)

    b = sub.add_parser("bench", help="runtime table for solvers on a test set")
    b.add_argument("--solvers", required=True,
                   help="comma list of ista,fista,adam,subgrad,learned")
    b.add_argument("--testset", required=True)
    b.add_argument("--checkpoint")
    b.add_argument("--tolerances", default="1e-3,1e-6")
    b.add_argument("--cap", type=int, default=2000,
                   help="iteration cap while hunting tolerances")
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
