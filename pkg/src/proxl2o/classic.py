"""Hand-designed baselines on composite objectives.

ISTA, FISTA, proximal gradient with a diagonal variable metric, subgradient
descent, and Adam.  Every run is deterministic given (problem, config, x0)
and returns a ConvergenceRecord of objective values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .prox import R_L1, R_ZERO, prox_composite


class UnsupportedProblem(ValueError):
    """Solver cannot handle the problem's nonsmooth part."""


@dataclass
class SolverConfig:
    kind: str = "ista"  # ista | fista | pgd_metric | subgrad | adam
    max_iter: int = 1000
    record_every: int | None = None  # default: 1 up to 1000 iterations, else 10
    step: float | None = None  # subgrad alpha0 / adam learning rate
    diminishing: bool = True  # subgrad: alpha_k = step / sqrt(k+1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fp_resid_tol: float | None = None  # fista: stop when the PGD fixed-point
    # residual ||x_k - prox(x_k - (1/L) grad f(x_k))|| drops below this
    fp_check_every: int = 1  # how often to evaluate that residual

    def __post_init__(self):
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1, beta2 must lie in (0, 1)")

    def stride(self) -> int:
        if self.record_every is not None:
            return max(1, int(self.record_every))
        return 1 if self.max_iter <= 1000 else 10


@dataclass
class ConvergenceRecord:
    instance_id: int = 0
    iters: list[int] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    gaps: list[float] | None = None
    wall_time_per_iter: float = 0.0
    converged: bool = True
    solution: np.ndarray | None = None

    def log(self, k: int, f: float):
        if self.iters and k <= self.iters[-1]:
            raise ValueError("iteration indices must be strictly increasing")
        self.iters.append(int(k))
        self.objectives.append(float(f))

    def with_gaps(self, f_star: float) -> "ConvergenceRecord":
        denom = abs(f_star) if abs(f_star) > 0 else 1.0
        self.gaps = [(f - f_star) / denom for f in self.objectives]
        return self

    def rows(self):
        gaps = self.gaps if self.gaps is not None else [None] * len(self.iters)
        return list(zip(self.iters, self.objectives, gaps))


def _finish(rec: ConvergenceRecord, t0: float, n_iter: int) -> ConvergenceRecord:
    rec.wall_time_per_iter = (time.perf_counter() - t0) / max(1, n_iter)
    return rec


def ista_run(problem, cfg: SolverConfig, x0, iterate_log: list | None = None) -> ConvergenceRecord:
    """Proximal gradient descent at the fixed step 1/L."""
    L = problem.lipschitz()
    step = 1.0 / L
    p = np.full(problem.dim, step)
    x = np.asarray(x0, dtype=np.float64).copy()
    rec = ConvergenceRecord()
    rec.log(0, problem.objective(x))
    stride = cfg.stride()
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        x = prox_composite(problem.reg, x - step * problem.grad_smooth(x), p, problem.lam)
        if iterate_log is not None:
            iterate_log.append(x.copy())
        if k % stride == 0 or k == cfg.max_iter:
            rec.log(k, problem.objective(x))
    rec.solution = x
    return _finish(rec, t0, cfg.max_iter)


def fista_run(problem, cfg: SolverConfig, x0, iterate_log: list | None = None) -> ConvergenceRecord:
    """Accelerated proximal gradient; records the prox-output track.

    y_{k+1} = prox(x_k - (1/L) grad f(x_k)),
    t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2   with t_0 = 1,
    x_{k+1} = y_{k+1} + ((t_k - 1) / t_{k+1}) (y_{k+1} - y_k).
    """
    L = problem.lipschitz()
    step = 1.0 / L
    p = np.full(problem.dim, step)
    x = np.asarray(x0, dtype=np.float64).copy()
    y = x.copy()
    t = 1.0
    rec = ConvergenceRecord()
    rec.log(0, problem.objective(y))
    stride = cfg.stride()
    rec.converged = cfg.fp_resid_tol is None
    t0 = time.perf_counter()
    n_done = 0
    for k in range(1, cfg.max_iter + 1):
        y_next = prox_composite(problem.reg, x - step * problem.grad_smooth(x), p, problem.lam)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        x = y_next + ((t - 1.0) / t_next) * (y_next - y)
        y = y_next
        t = t_next
        if iterate_log is not None:
            iterate_log.append(y.copy())
        n_done = k
        if k % stride == 0 or k == cfg.max_iter:
            rec.log(k, problem.objective(y))
        if cfg.fp_resid_tol is not None and (k % cfg.fp_check_every == 0 or k == cfg.max_iter):
            # fixed-point residual of the plain PGD map at y
            step_pt = prox_composite(
                problem.reg, y - step * problem.grad_smooth(y), p, problem.lam
            )
            if float(np.linalg.norm(y - step_pt)) <= cfg.fp_resid_tol:
                rec.converged = True
                if rec.iters[-1] != k:
                    rec.log(k, problem.objective(y))
                break
    rec.solution = y
    return _finish(rec, t0, n_done)


def pgd_metric_run(problem, metric_schedule, x0, max_iter: int = 1000,
                   record_every: int | None = None,
                   iterate_log: list | None = None) -> ConvergenceRecord:
    """Proximal gradient with a per-iteration diagonal metric p_k.

    metric_schedule is a callable k -> p-vector, or a constant vector.
    """
    if callable(metric_schedule):
        metric_at = metric_schedule
    else:
        const = np.asarray(metric_schedule, dtype=np.float64)
        metric_at = lambda k: const  # noqa: E731
    x = np.asarray(x0, dtype=np.float64).copy()
    rec = ConvergenceRecord()
    rec.log(0, problem.objective(x))
    stride = record_every or (1 if max_iter <= 1000 else 10)
    t0 = time.perf_counter()
    for k in range(1, max_iter + 1):
        p = np.asarray(metric_at(k - 1), dtype=np.float64)
        if np.any(p <= 0):
            raise ValueError(f"metric at iteration {k - 1} has nonpositive entries")
        x = prox_composite(problem.reg, x - p * problem.grad_smooth(x), p, problem.lam)
        if iterate_log is not None:
            iterate_log.append(x.copy())
        if k % stride == 0 or k == max_iter:
            rec.log(k, problem.objective(x))
    rec.solution = x
    return _finish(rec, t0, max_iter)


def _subgradient(problem, x) -> np.ndarray:
    """Deterministic subgradient of F; sign(0) := 0 on the l1 kink."""
    if problem.reg == R_L1:
        return problem.grad_smooth(x) + problem.lam * np.sign(x)
    if problem.reg == R_ZERO:
        return problem.grad_smooth(x)
    raise UnsupportedProblem(
        f"subgradient oracle undefined for nonsmooth tag {problem.reg!r}"
    )


def subgrad_run(problem, cfg: SolverConfig, x0) -> ConvergenceRecord:
    """Subgradient descent, diminishing step alpha_k = alpha0 / sqrt(k+1)."""
    alpha0 = cfg.step if cfg.step is not None else 1.0 / problem.lipschitz()
    x = np.asarray(x0, dtype=np.float64).copy()
    rec = ConvergenceRecord()
    rec.log(0, problem.objective(x))
    stride = cfg.stride()
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        alpha = alpha0 / np.sqrt(k) if cfg.diminishing else alpha0
        x = x - alpha * _subgradient(problem, x)
        if k % stride == 0 or k == cfg.max_iter:
            rec.log(k, problem.objective(x))
    rec.solution = x
    return _finish(rec, t0, cfg.max_iter)


def adam_run(problem, cfg: SolverConfig, x0) -> ConvergenceRecord:
    """Adam on the subgradient oracle of F, standard bias correction."""
    lr = cfg.step if cfg.step is not None else 1e-3
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    rec = ConvergenceRecord()
    rec.log(0, problem.objective(x))
    stride = cfg.stride()
    t0 = time.perf_counter()
    for k in range(1, cfg.max_iter + 1):
        g = _subgradient(problem, x)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**k)
        vhat = v / (1.0 - cfg.beta2**k)
        x = x - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if k % stride == 0 or k == cfg.max_iter:
            rec.log(k, problem.objective(x))
    rec.solution = x
    return _finish(rec, t0, cfg.max_iter)


SOLVER_RUNNERS = {
    "ista": ista_run,
    "fista": fista_run,
    "subgrad": subgrad_run,
    "adam": adam_run,
}
