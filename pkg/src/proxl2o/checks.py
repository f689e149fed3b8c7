"""Self-contained oracle batteries behind `proxl2o check`.

Each battery re-derives expected values with an algorithm independent of the
implementation it validates: scalar ternary search for the l1 prox, the
sort-based projection for the simplex prox, subdifferential membership for
the composite dispatch, and central finite differences for unrolled
gradients.
"""

from __future__ import annotations

import numpy as np

from . import learned
from .densecore import named_stream
from .problems import BatchedProblems, CompositeProblem, generate_lasso
from .prox import DiagMetric, prox_composite, prox_l1, prox_simplex
from .tape import Tape


def ternary_search_prox_scalar(v: float, p: float, lam: float,
                               iters: int = 200) -> float:
    """argmin_t lam*|t| + (t - v)^2 / (2p) by ternary search on a safe bracket.

    The branch test evaluates phi(m1) - phi(m2) in difference form,
    lam*(|m1|-|m2|) + (m1-m2)(m1+m2-2v)/(2p), so the comparison stays exact
    near the minimum instead of stalling at the sqrt(eps) value-comparison
    floor.
    """
    half_width = abs(v) + lam * p + 1.0
    lo, hi = -half_width, half_width
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        diff = lam * (abs(m1) - abs(m2)) + (m1 - m2) * (m1 + m2 - 2.0 * v) / (2.0 * p)
        if diff <= 0.0:
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


def simplex_sort_projection(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the simplex via the sorted-cumsum rule."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u - (css - 1.0) / np.arange(1, len(v) + 1) > 0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def l1_optimality_violation(x_out: np.ndarray, v: np.ndarray, p: np.ndarray,
                            lam: float) -> float:
    """Worst violation of 0 in lam*sign(x) + diag(p)^-1 (x - v), coordinatewise."""
    worst = 0.0
    for xi, vi, pi in zip(x_out, v, p):
        if xi != 0.0:
            worst = max(worst, abs(xi - (vi - lam * pi * np.sign(xi))))
        else:
            worst = max(worst, max(0.0, abs(vi) - lam * pi))
    return worst


def prox_oracle_battery(cases: int = 1000, seed: int = 7) -> dict:
    """Max deviations of the prox implementations from independent oracles.

    Returns {check_name: (deviation, tolerance)}.
    """
    rng = named_stream(seed, "check/prox")
    out = {}

    vs = 4.0 * rng.normal(cases)
    ps = 0.05 + 2.0 * rng.uniform(cases)
    lams = 0.05 + rng.uniform(cases)
    dev = 0.0
    for v, p, lam in zip(vs, ps, lams):
        got = prox_l1(np.array([v]), DiagMetric(np.array([p])), float(lam))[0]
        want = ternary_search_prox_scalar(float(v), float(p), float(lam))
        dev = max(dev, abs(got - want))
    out["l1 vs ternary search"] = (dev, 1e-8)

    dev = 0.0
    for _ in range(cases):
        v = 2.0 * rng.normal(8)
        got = prox_simplex(v, DiagMetric(np.ones(8)))
        want = simplex_sort_projection(v)
        dev = max(dev, float(np.max(np.abs(got - want))))
    out["simplex vs sort projection"] = (dev, 1e-8)

    dev = 0.0
    for _ in range(200):
        v = 3.0 * rng.normal(6)
        p = 0.1 + rng.uniform(6)
        lam = 0.05 + float(rng.uniform(1)[0])
        x_out = prox_l1(v, DiagMetric(p), lam)
        dev = max(dev, l1_optimality_violation(x_out, v, p, lam))
    out["l1 optimality condition"] = (dev, 1e-10)

    dev = 0.0
    for _ in range(200):
        v = 2.0 * rng.normal(4)
        p = 0.2 + rng.uniform(4)
        x_out = prox_composite("nonneg", v, DiagMetric(p))
        active = x_out > 0
        dev = max(dev, float(np.max(np.abs(np.where(active, x_out - v, np.maximum(v, 0.0))))))
        x_out = prox_composite("simplex", v, DiagMetric(p))
        xi = (v - x_out)[x_out > 0] / p[x_out > 0]
        dev = max(dev, float(np.max(xi) - np.min(xi)), abs(float(np.sum(x_out)) - 1.0))
        inactive = x_out == 0
        if np.any(inactive):
            dev = max(dev, float(np.max(v[inactive] / p[inactive] - np.max(xi))), 0.0)
    out["indicator optimality"] = (dev, 1e-9)
    return out


def pa_test_setup(seed: int = 11, m: int = 5, n: int = 10):
    """Small deterministic problem + model used by the gradient checks."""
    rng = named_stream(seed, "check/bptt")
    problem = CompositeProblem.from_lasso(generate_lasso(rng, m, n, 3, 0.1))
    params = learned.init_params(learned.ablation_preset("PA"), seed=seed + 1)
    return problem, params


def unrolled_loss(problem: CompositeProblem, params, steps: int) -> float:
    _, loss = learned.rollout(problem, params, steps)
    return float(loss)


def unrolled_gradients(problem: CompositeProblem, params, steps: int) -> dict:
    tape = Tape()
    _, loss = learned.rollout(problem, params, steps, tape=tape)
    return tape.backward(loss)


def finite_difference_gradient(problem, params, steps: int, key: str, index,
                               h: float = 1e-6) -> float:
    w = params.weights[key]
    orig = w[index]
    w[index] = orig + h
    f_plus = unrolled_loss(problem, params, steps)
    w[index] = orig - h
    f_minus = unrolled_loss(problem, params, steps)
    w[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def bptt_gradient_check(steps: int = 3, h: float = 1e-6, denom_floor: float = 1e-3,
                        seed: int = 11) -> float:
    """Worst relative error of reverse-mode vs central-difference gradients
    over every parameter of a small unrolled run."""
    problem, params = pa_test_setup(seed=seed)
    grads = unrolled_gradients(problem, params, steps)
    worst = 0.0
    for key in params.trainable_keys():
        g = grads[key]
        it = np.nditer(g, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            fd = finite_difference_gradient(problem, params, steps, key, idx, h)
            rel = abs(float(g[idx]) - fd) / max(abs(fd), abs(float(g[idx])), denom_floor)
            worst = max(worst, rel)
            it.iternext()
    return worst
