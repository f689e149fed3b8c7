"""Evaluation harness: gap curves, theory checks, and runtime tables.

Gaps are measured against the high-accuracy F* oracle as (F - F*)/F*.
Median across instances is the headline aggregate (distributions are
heavy-tailed near machine precision); means are emitted alongside.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classic, learned
from .densecore import named_stream, parallel_map
from .problems import BatchedProblems, CompositeProblem, ProblemSet, generate_lasso
from .prox import soft_threshold
from .tape import EAGER

GAP_FLOOR = 1e-16  # clamp for log-scale export only


@dataclass
class SolverSpec:
    name: str
    kind: str  # ista | fista | adam | subgrad | learned
    params: learned.LearnedOptimizerParams | None = None
    step: float | None = None  # adam / subgrad step size

    @classmethod
    def baseline(cls, kind: str, step: float | None = None) -> "SolverSpec":
        return cls(name=kind, kind=kind, step=step)

    @classmethod
    def from_params(cls, params: learned.LearnedOptimizerParams,
                    name: str | None = None) -> "SolverSpec":
        default = "l2o-pa" if params.ablation.name == "PA" else f"l2o-{params.ablation.name.lower()}"
        if params.kind == "generic":
            default = "l2o-generic"
        return cls(name=name or default, kind="learned", params=params)


@dataclass
class EvalReport:
    solver_names: list[str] = field(default_factory=list)
    records: dict = field(default_factory=dict)  # name -> [ConvergenceRecord]
    iters: list[int] = field(default_factory=list)
    median_gap: dict = field(default_factory=dict)  # name -> array over iters
    mean_gap: dict = field(default_factory=dict)
    iters_to_tol: dict = field(default_factory=dict)  # name -> {tol: median or None}
    time_per_iter: dict = field(default_factory=dict)  # name -> seconds
    traces: dict = field(default_factory=dict)  # name -> {channel: [per-k mean norm]}
    tolerances: tuple = (1e-3, 1e-6)

    def min_gap(self) -> float:
        out = np.inf
        for recs in self.records.values():
            for r in recs:
                if r.gaps:
                    out = min(out, min(r.gaps))
        return out

    # -- exports ----------------------------------------------------------

    def write_curves_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("solver,instance_id,iter,objective,gap\n")
            for name in self.solver_names:
                for rec in self.records[name]:
                    for k, f, gap in rec.rows():
                        gtxt = "" if gap is None else repr(gap)
                        fh.write(f"{name},{rec.instance_id},{k},{f!r},{gtxt}\n")

    def write_aggregates_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("solver,iter,median_gap,mean_gap\n")
            for name in self.solver_names:
                med, mean = self.median_gap[name], self.mean_gap[name]
                for i, k in enumerate(self.iters):
                    fh.write(f"{name},{k},{med[i]!r},{mean[i]!r}\n")

    def write_runtime_csv(self, path) -> None:
        cols = ["solver", "time_per_iter_ms"]
        for tol in self.tolerances:
            cols += [f"iters_to_{tol:g}", f"total_time_to_{tol:g}_ms"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for name in self.solver_names:
                tpi_ms = self.time_per_iter[name] * 1e3
                row = [name, f"{tpi_ms:.6g}"]
                for tol in self.tolerances:
                    iters = self.iters_to_tol[name].get(tol)
                    if iters is None:
                        row += ["N/A", "N/A"]
                    else:
                        row += [f"{iters:g}", f"{tpi_ms * iters:.6g}"]
                fh.write(",".join(row) + "\n")

    def write_svg(self, path, title: str = "optimality gap") -> None:
        write_gap_svg(path, self.iters, self.median_gap, self.solver_names, title)


def ensure_fstars(problems: list[CompositeProblem], tol: float = 1e-12,
                  max_iter: int = 200_000, threads: int | None = None) -> None:
    parallel_map(lambda p: p.ensure_fstar(tol, max_iter), problems, threads)


def _run_classic(spec: SolverSpec, problems, K: int, threads) -> list:
    cfg = classic.SolverConfig(kind=spec.kind, max_iter=K, record_every=1,
                               step=spec.step)
    runner = classic.SOLVER_RUNNERS[spec.kind]

    def one(arg):
        idx, problem = arg
        rec = runner(problem, cfg, np.zeros(problem.dim))
        rec.instance_id = idx
        return rec

    return parallel_map(one, list(enumerate(problems)), threads)


def _run_learned(spec: SolverSpec, problems, K: int, want_traces: bool):
    bp = BatchedProblems(problems)
    t0 = time.perf_counter()
    out = learned.rollout_batch(bp, spec.params, K, want_objectives=True,
                                want_traces=want_traces)
    elapsed = time.perf_counter() - t0
    objectives = out["objectives"]  # (K+1, B)
    recs = []
    for i in range(bp.count):
        rec = classic.ConvergenceRecord(instance_id=i)
        for k in range(K + 1):
            rec.log(k, float(objectives[k][i]))
        rec.wall_time_per_iter = elapsed / max(1, K * bp.count)
        rec.solution = np.asarray(out["state"].x)[i]
        recs.append(rec)
    return recs, out["traces"]


def _first_below(rec, tol: float):
    for k, _, gap in rec.rows():
        if gap is not None and k > 0 and gap <= tol:
            return k
    return None


def evaluate(solvers: list[SolverSpec], testset: ProblemSet, K: int,
             tolerances=(1e-3, 1e-6), threads: int | None = None,
             fstar_tol: float = 1e-12, fstar_max_iter: int = 200_000,
             want_traces: bool = False) -> EvalReport:
    """Run each solver K iterations on every instance and aggregate gaps."""
    problems = testset.problems
    ensure_fstars(problems, fstar_tol, fstar_max_iter, threads)
    report = EvalReport(tolerances=tuple(tolerances), iters=list(range(K + 1)))
    for spec in solvers:
        if spec.kind == "learned":
            if spec.params is None:
                raise ValueError(f"solver {spec.name!r} needs checkpoint parameters")
            recs, traces = _run_learned(spec, problems, K, want_traces)
            if want_traces:
                report.traces[spec.name] = traces
        elif spec.kind in classic.SOLVER_RUNNERS:
            recs = _run_classic(spec, problems, K, threads)
        else:
            raise ValueError(f"unknown solver kind {spec.kind!r}")
        for rec, problem in zip(recs, problems):
            rec.with_gaps(problem.f_star)
        report.solver_names.append(spec.name)
        report.records[spec.name] = recs
        gaps = np.array([rec.gaps for rec in recs])  # (B, K+1)
        report.median_gap[spec.name] = np.median(gaps, axis=0)
        report.mean_gap[spec.name] = np.mean(gaps, axis=0)
        report.time_per_iter[spec.name] = float(
            np.mean([rec.wall_time_per_iter for rec in recs]))
        report.iters_to_tol[spec.name] = {}
        for tol in tolerances:
            firsts = [_first_below(rec, tol) for rec in recs]
            vals = [np.inf if f is None else f for f in firsts]
            med = float(np.median(vals))
            report.iters_to_tol[spec.name][tol] = None if not np.isfinite(med) else med
    return report


def trace_coefficients(params: learned.LearnedOptimizerParams, testset: ProblemSet,
                       K: int) -> dict:
    """Per-iteration mean (over instances) coefficient-vector norms."""
    bp = BatchedProblems(testset.problems)
    out = learned.rollout_batch(bp, params, K, want_traces=True)
    return out["traces"]


def runtime_table(solvers: list[SolverSpec], testset: ProblemSet,
                  tolerances=(1e-3, 1e-6), cap: int = 2000,
                  threads: int | None = None) -> EvalReport:
    """Appendix-style runtime comparison: time/iter, iterations and total
    time to each gap tolerance; N/A when a tolerance is never reached."""
    return evaluate(solvers, testset, cap, tolerances=tolerances, threads=threads)


def cross_scale_eval(params: learned.LearnedOptimizerParams, big_set: ProblemSet,
                     K: int, threads: int | None = None) -> EvalReport:
    """Apply a small-problem model unchanged to larger instances; the
    coordinate-wise trunk makes the parameter count dimension-free."""
    specs = [SolverSpec.from_params(params), SolverSpec.baseline("fista")]
    return evaluate(specs, big_set, K, threads=threads)


# -- theory checks -----------------------------------------------------------------


def fixed_point_residuals(params: learned.LearnedOptimizerParams,
                          problems: list[CompositeProblem],
                          fstar_tol: float = 1e-12,
                          threads: int | None = None) -> list[float]:
    """Distance moved by one learned step started exactly at the oracle
    solution (x = y = x*); small residuals mean the scheme leaves
    minimizers fixed."""
    ensure_fstars(problems, fstar_tol, threads=threads)
    out = []
    for problem in problems:
        bp = BatchedProblems([problem])
        xs = problem.x_star_oracle.reshape(1, -1).copy()
        state = learned.RolloutState(
            x=xs, y=xs.copy(),
            hidden=learned.initial_hidden(params, bp.dim))
        gx = learned.grad_ops(EAGER, bp, state.x)
        raw, _ = learned.lstm_mlp_forward(params, state.x, gx, state.hidden)
        coeffs = learned.resolve_coeffs(params, bp, raw)
        new = learned.structured_step(bp, state, coeffs, grad_x=gx)
        out.append(float(np.linalg.norm(np.asarray(new.x) - xs)))
    return out


def step_norm_trace(params: learned.LearnedOptimizerParams, testset: ProblemSet,
                    K: int) -> np.ndarray:
    """Mean ||x_{k+1} - x_k|| per iteration over the test set (empirical
    convergence monitor)."""
    bp = BatchedProblems(testset.problems)
    state = learned.initial_state(params, bp)
    norms = np.empty(K)
    for k in range(K):
        x_old = np.asarray(state.x)
        gx = learned.grad_ops(EAGER, bp, state.x)
        g_in = learned.subgrad_ops(EAGER, bp, state.x) if params.kind == "generic" else gx
        raw, hidden = learned.lstm_mlp_forward(params, state.x, g_in, state.hidden)
        coeffs = learned.resolve_coeffs(params, bp, raw)
        if params.kind == "generic":
            state = learned.generic_step(bp, state, coeffs.d)
        else:
            state = learned.structured_step(bp, state, coeffs, grad_x=gx)
        state.hidden = hidden
        norms[k] = float(np.mean(np.linalg.norm(np.asarray(state.x) - x_old, axis=1)))
    return norms


def equivalence_suite(seed: int = 20240, m: int = 250, n: int = 500,
                      steps: int = 200) -> dict:
    """Reduction checks of the structured scheme against closed-form peers.

    Returns max deviations for: FISTA reduction, variable-metric PGD
    reduction, and the threshold-shift identity.
    """
    rng = named_stream(seed, "equivalence/lasso")
    problem = CompositeProblem.from_lasso(generate_lasso(rng, m, n, max(1, n // 10), 0.1))
    bp = BatchedProblems([problem])
    L = problem.lipschitz()

    # structured scheme with FISTA coefficients vs the standalone FISTA
    schedule = learned.fista_momentum_schedule(steps)
    state = learned.RolloutState(x=np.zeros((1, n)), y=np.zeros((1, n)), hidden=[])
    fista_y = []
    cfg = classic.SolverConfig(kind="fista", max_iter=steps, record_every=steps)
    classic.fista_run(problem, cfg, np.zeros(n), iterate_log=fista_y)
    dev_fista = 0.0
    for k in range(steps):
        state = learned.structured_step(bp, state, learned.fista_coeffs(bp, k, schedule))
        dev_fista = max(dev_fista, float(np.max(np.abs(state.x[0] - fista_y[k]))))

    # structured scheme with only p active vs variable-metric PGD
    p_rng = named_stream(seed, "equivalence/metric")
    scales = 0.2 + 1.6 * p_rng.uniform(100)
    metrics = [np.full(n, s / L) for s in scales]
    pgd_x = []
    classic.pgd_metric_run(problem, lambda k: metrics[k], np.zeros(n),
                           max_iter=100, record_every=100, iterate_log=pgd_x)
    zeros = np.zeros((1, n))
    state = learned.RolloutState(x=zeros.copy(), y=zeros.copy(), hidden=[])
    dev_pgd = 0.0
    for k in range(100):
        coeffs = learned.StructuredCoeffs(p=metrics[k][None, :], a=zeros, b=zeros,
                                          b1=zeros, b2=zeros)
        state = learned.structured_step(bp, state, coeffs)
        dev_pgd = max(dev_pgd, float(np.max(np.abs(state.x[0] - pgd_x[k]))))

    # threshold-shift identity on both branches
    from .prox import threshold_shift

    t_rng = named_stream(seed, "equivalence/shift")
    vhat = 4.0 * t_rng.normal(10_000)
    dev_shift = 0.0
    for p_scalar, lam, theta in ((0.7, 0.3, 0.9), (0.7, 0.3, 0.05)):
        b1 = threshold_shift(vhat, p_scalar, lam, theta)
        lhs = soft_threshold(vhat - b1, lam * p_scalar)
        rhs = soft_threshold(vhat, theta)
        dev_shift = max(dev_shift, float(np.max(np.abs(lhs - rhs))))

    return {
        "fista_reduction": dev_fista,
        "pgd_reduction": dev_pgd,
        "threshold_shift": dev_shift,
        "pass": dev_fista <= 1e-10 and dev_pgd <= 1e-14 and dev_shift <= 1e-13,
    }


# -- svg export -------------------------------------------------------------------


def write_gap_svg(path, iters, gap_by_solver: dict, order: list[str],
                  title: str = "optimality gap") -> None:
    """Minimal log-y line plot; gaps are clamped at the export floor."""
    width, height = 840, 520
    ml, mr, mt, mb = 70, 170, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
              "#8c564b", "#17becf", "#7f7f7f"]
    series = {name: np.maximum(np.asarray(gap_by_solver[name], dtype=float), GAP_FLOOR)
              for name in order}
    lo = min(float(np.min(v)) for v in series.values())
    hi = max(float(np.max(v)) for v in series.values())
    y0, y1 = np.floor(np.log10(lo)), np.ceil(np.log10(max(hi, lo * 10)))
    if y1 <= y0:
        y1 = y0 + 1
    x_max = max(int(iters[-1]), 1)

    def xpix(k):
        return ml + pw * k / x_max

    def ypix(g):
        return mt + ph * (y1 - np.log10(g)) / (y1 - y0)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{ml}" y="24" font-size="15">{title}</text>']
    for d in range(int(y0), int(y1) + 1):
        y = ypix(10.0**d)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" '
                     'stroke="#dddddd"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">1e{d}</text>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        k = int(round(frac * x_max))
        parts.append(f'<text x="{xpix(k):.1f}" y="{mt + ph + 18}" '
                     f'text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{ml + pw / 2:.0f}" y="{height - 12}" '
                 'text-anchor="middle">iteration</text>')
    parts.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
                 'stroke="#333333"/>')
    for i, name in enumerate(order):
        color = colors[i % len(colors)]
        pts = " ".join(f"{xpix(k):.1f},{ypix(g):.1f}"
                       for k, g in zip(iters, series[name]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.6"/>')
        ly = mt + 16 + 18 * i
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 34}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 40}" y="{ly}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
