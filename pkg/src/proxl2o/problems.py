"""Optimizee abstraction: composite objectives, generators, and ingestion.

A CompositeProblem is F = f + r where f is the smooth part (least-squares
residual or logistic likelihood) and r the nonsmooth part (l1, nonnegative
or simplex indicator, or zero).  Synthetic generators follow the standard
sparse-recovery recipes; file ingestion covers binary problem-set
directories and CSV tables for out-of-distribution evaluation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classic
from .densecore import RngStream, ShapeError, named_stream, spectral_norm_sq
from .prox import R_L1, R_NONNEG, R_SIMPLEX, R_ZERO, R_TAGS, prox_composite

SMOOTH_LASSO = "lasso_quadratic"
SMOOTH_LOGISTIC = "logistic"


class ProblemFormatError(ValueError):
    """Malformed problem-set directory or CSV input."""


@dataclass
class LassoInstance:
    A: np.ndarray  # (m, n); unit-norm columns when generated
    b: np.ndarray  # (m,)
    lam: float
    x_star: np.ndarray | None = None  # planted sparse vector (generator only)


@dataclass
class LogisticInstance:
    features: np.ndarray  # (m, n), rows a_i^T
    labels: np.ndarray  # (m,) of {0.0, 1.0}
    lam: float
    x_star: np.ndarray | None = None


class CompositeProblem:
    """F(x) = f(x) + r(x) with cached Lipschitz constant and F* oracle."""

    def __init__(self, smooth: str, reg: str, lam: float, *, A=None, b=None,
                 features=None, labels=None, planted=None):
        if reg not in R_TAGS:
            raise ValueError(f"unknown nonsmooth tag {reg!r}")
        self.smooth = smooth
        self.reg = reg
        self.lam = float(lam)
        self.planted = planted
        if smooth == SMOOTH_LASSO:
            self.A = np.asarray(A, dtype=np.float64)
            self.b = np.asarray(b, dtype=np.float64)
            self.dim = self.A.shape[1]
            self.m = self.A.shape[0]
        elif smooth == SMOOTH_LOGISTIC:
            self.features = np.asarray(features, dtype=np.float64)
            self.labels = np.asarray(labels, dtype=np.float64)
            if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
                raise ValueError("logistic labels must be exactly 0 or 1")
            self.dim = self.features.shape[1]
            self.m = self.features.shape[0]
        else:
            raise ValueError(f"unknown smooth tag {smooth!r}")
        self._lipschitz: float | None = None
        self.f_star: float | None = None
        self.f_star_confident = False
        self.x_star_oracle: np.ndarray | None = None

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_lasso(cls, inst: LassoInstance, reg: str = R_L1) -> "CompositeProblem":
        return cls(SMOOTH_LASSO, reg, inst.lam, A=inst.A, b=inst.b, planted=inst.x_star)

    @classmethod
    def from_logistic(cls, inst: LogisticInstance, reg: str = R_L1) -> "CompositeProblem":
        return cls(SMOOTH_LOGISTIC, reg, inst.lam, features=inst.features,
                   labels=inst.labels, planted=inst.x_star)

    # -- oracles ---------------------------------------------------------------

    def smooth_value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"x has shape {x.shape}, problem dim is {self.dim}")
        if self.smooth == SMOOTH_LASSO:
            r = self.A @ x - self.b
            return 0.5 * float(r @ r)
        z = self.features @ x
        # -(1/m) sum [b log h(z) + (1-b) log(1-h(z))] == mean(softplus(z) - b z)
        return float(np.mean(np.logaddexp(0.0, z) - self.labels * z))

    def reg_value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if self.reg == R_L1:
            return self.lam * float(np.sum(np.abs(x)))
        if self.reg == R_ZERO:
            return 0.0
        if self.reg == R_NONNEG:
            return 0.0 if np.all(x >= 0.0) else np.inf
        feasible = np.all(x >= 0.0) and abs(float(np.sum(x)) - 1.0) <= 1e-9
        return 0.0 if feasible else np.inf

    def objective(self, x) -> float:
        return self.smooth_value(x) + self.reg_value(x)

    def grad_smooth(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"x has shape {x.shape}, problem dim is {self.dim}")
        if self.smooth == SMOOTH_LASSO:
            return self.A.T @ (self.A @ x - self.b)
        z = self.features @ x
        h = np.empty_like(z)
        pos = z >= 0
        h[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        h[~pos] = ez / (1.0 + ez)
        return self.features.T @ (h - self.labels) / self.m

    def lipschitz(self) -> float:
        if self._lipschitz is None:
            if self.smooth == SMOOTH_LASSO:
                self._lipschitz = spectral_norm_sq(self.A)
            else:
                # standard bound: the logistic sigmoid has derivative <= 1/4
                self._lipschitz = spectral_norm_sq(self.features) / (4.0 * self.m)
        return self._lipschitz

    def ensure_fstar(self, tol: float = 1e-12, max_iter: int = 200_000) -> float:
        """High-accuracy reference value via FISTA run to a tiny fixed-point
        residual; caches both F* and the oracle solution."""
        if self.f_star is not None:
            return self.f_star
        if tol <= 0:
            raise ValueError("tol must be > 0")
        cfg = classic.SolverConfig(kind="fista", max_iter=max_iter,
                                   record_every=max_iter, fp_resid_tol=tol,
                                   fp_check_every=5)
        rec = classic.fista_run(self, cfg, np.zeros(self.dim))
        self.x_star_oracle = rec.solution
        self.f_star = self.objective(rec.solution)
        self.f_star_confident = rec.converged
        return self.f_star


def fstar_oracle(problem: CompositeProblem, tol: float = 1e-12,
                 max_iter: int = 200_000) -> float:
    return problem.ensure_fstar(tol, max_iter)


# -- synthetic generators ------------------------------------------------------


def generate_lasso(rng: RngStream, m: int, n: int, s: int, lam: float) -> LassoInstance:
    """Gaussian design with unit-norm columns and a planted s-sparse signal.

    b = A x_star exactly, so F(x_star) = lam * ||x_star||_1.
    """
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    A = rng.normal(m * n).reshape(m, n)
    A = A / np.linalg.norm(A, axis=0)
    support = rng.indices(n, s)
    x_star = np.zeros(n)
    x_star[support] = rng.normal(s)
    b = A @ x_star
    return LassoInstance(A=A, b=b, lam=float(lam), x_star=x_star)


def generate_logistic(rng: RngStream, m: int, n: int, s: int, lam: float) -> LogisticInstance:
    """Gaussian features; labels are the sign pattern of a planted signal."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    features = rng.normal(m * n).reshape(m, n)
    support = rng.indices(n, s)
    x_star = np.zeros(n)
    x_star[support] = rng.normal(s)
    labels = (features @ x_star >= 0.0).astype(np.float64)
    return LogisticInstance(features=features, labels=labels, lam=float(lam),
                            x_star=x_star)


# -- problem sets ----------------------------------------------------------------


@dataclass
class ProblemSet:
    kind: str  # "lasso" | "logistic"
    problems: list[CompositeProblem]
    seed: int
    m: int
    n: int
    lam: float
    sparsity: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.problems)


def generate_set(kind: str, count: int, m: int, n: int, s: int, lam: float,
                 seed: int) -> ProblemSet:
    """count independent instances; instance i draws from its own named
    stream, so generation order and worker count cannot matter."""
    if count < 1:
        raise ValueError("count must be >= 1")
    problems = []
    for i in range(count):
        rng = named_stream(seed, f"data/{kind}/{i}")
        if kind == "lasso":
            problems.append(CompositeProblem.from_lasso(generate_lasso(rng, m, n, s, lam)))
        elif kind == "logistic":
            problems.append(CompositeProblem.from_logistic(generate_logistic(rng, m, n, s, lam)))
        else:
            raise ValueError(f"unknown problem kind {kind!r}")
    return ProblemSet(kind=kind, problems=problems, seed=seed, m=m, n=n,
                      lam=lam, sparsity=s)


def save_problemset(ps: ProblemSet, path) -> None:
    """Directory with manifest.json + data.bin (little-endian float64).

    Per instance, arrays are concatenated in the manifest-declared order:
    lasso stores A row-major then b; logistic stores the feature matrix
    row-major then labels as 0.0/1.0.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layout = ["A", "b"] if ps.kind == "lasso" else ["features", "labels"]
    manifest = {
        "format_version": 1,
        "kind": ps.kind,
        "count": len(ps.problems),
        "m": ps.m,
        "n": ps.n,
        "lambda": ps.lam,
        "sparsity": ps.sparsity,
        "seed": ps.seed,
        "layout": layout,
        "order": "row_major",
        "dtype": "<f8",
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(path / "data.bin", "wb") as fh:
        for p in ps.problems:
            if ps.kind == "lasso":
                fh.write(np.ascontiguousarray(p.A, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(p.b, dtype="<f8").tobytes())
            else:
                fh.write(np.ascontiguousarray(p.features, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(p.labels, dtype="<f8").tobytes())


def load_problemset(path) -> ProblemSet:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ProblemFormatError(f"missing manifest.json under {path}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise ProblemFormatError(f"malformed manifest.json: {e}") from e
    for key in ("kind", "count", "m", "n", "lambda", "sparsity", "seed"):
        if key not in manifest:
            raise ProblemFormatError(f"manifest.json missing field {key!r}")
    kind = manifest["kind"]
    if kind not in ("lasso", "logistic"):
        raise ProblemFormatError(f"unknown problem kind {kind!r} in manifest")
    count, m, n = int(manifest["count"]), int(manifest["m"]), int(manifest["n"])
    lam = float(manifest["lambda"])
    per_instance = m * n + m
    raw = np.fromfile(path / "data.bin", dtype="<f8")
    if raw.size != count * per_instance:
        raise ProblemFormatError(
            f"data.bin holds {raw.size} values, manifest implies {count * per_instance}"
        )
    problems = []
    for i in range(count):
        block = raw[i * per_instance:(i + 1) * per_instance]
        mat = block[: m * n].reshape(m, n).copy()
        vec = block[m * n:].copy()
        if kind == "lasso":
            problems.append(CompositeProblem.from_lasso(LassoInstance(A=mat, b=vec, lam=lam)))
        else:
            if not np.all((vec == 0.0) | (vec == 1.0)):
                bad = int(np.argmax((vec != 0.0) & (vec != 1.0)))
                raise ProblemFormatError(
                    f"instance {i}: label row {bad} is {vec[bad]!r}, must be 0 or 1"
                )
            problems.append(CompositeProblem.from_logistic(
                LogisticInstance(features=mat, labels=vec, lam=lam)))
    return ProblemSet(kind=kind, problems=problems, seed=int(manifest["seed"]),
                      m=m, n=n, lam=lam, sparsity=int(manifest["sparsity"]),
                      meta=manifest)


def load_logistic_csv(path, lam: float, standardize: bool = False) -> LogisticInstance:
    """CSV with feature columns and a final {0,1} label column.

    An optional header row is skipped when its cells are not numeric.
    standardize applies a per-feature z-score (constant columns untouched).
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, cells in enumerate(reader, start=1):
            if not cells or all(c.strip() == "" for c in cells):
                continue
            if lineno == 1:
                try:
                    [float(c) for c in cells]
                except ValueError:
                    continue  # header row
            try:
                rows.append(([float(c) for c in cells], lineno))
            except ValueError as e:
                raise ProblemFormatError(f"row {lineno}: non-numeric cell ({e})") from e
    if not rows:
        raise ProblemFormatError("CSV has no data rows")
    width = len(rows[0][0])
    if width < 2:
        raise ProblemFormatError("CSV needs at least one feature column plus the label")
    data = np.empty((len(rows), width))
    for i, (vals, lineno) in enumerate(rows):
        if len(vals) != width:
            raise ProblemFormatError(
                f"row {lineno}: has {len(vals)} fields, expected {width}"
            )
        data[i] = vals
    labels = data[:, -1]
    bad = (labels != 0.0) & (labels != 1.0)
    if np.any(bad):
        lineno = rows[int(np.argmax(bad))][1]
        raise ProblemFormatError(f"row {lineno}: label must be 0 or 1, got {labels[np.argmax(bad)]}")
    features = data[:, :-1].copy()
    if standardize:
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        sd[sd == 0.0] = 1.0
        features = (features - mu) / sd
    return LogisticInstance(features=features, labels=labels, lam=float(lam))


# -- batched view -----------------------------------------------------------------


class BatchedProblems:
    """Stacked view over same-shape problems for vectorized rollouts.

    The per-instance arithmetic is looped gemv, so results are bit-identical
    to evaluating each CompositeProblem separately.
    """

    def __init__(self, problems: list[CompositeProblem]):
        if not problems:
            raise ValueError("empty problem list")
        first = problems[0]
        self.smooth = first.smooth
        self.reg = first.reg
        self.dim = first.dim
        self.m = first.m
        for p in problems:
            if (p.smooth, p.reg, p.dim, p.m) != (self.smooth, self.reg, self.dim, self.m):
                raise ValueError("batched problems must share kind and dimensions")
        self.problems = problems
        self.count = len(problems)
        if self.smooth == SMOOTH_LASSO:
            self.mats = np.stack([p.A for p in problems])
            self.vecs = np.stack([p.b for p in problems])
        else:
            self.mats = np.stack([p.features for p in problems])
            self.vecs = np.stack([p.labels for p in problems])
        self.lam = np.array([p.lam for p in problems])
        self._L: np.ndarray | None = None

    def lipschitz(self) -> np.ndarray:
        if self._L is None:
            self._L = np.array([p.lipschitz() for p in self.problems])
        return self._L

    def grad(self, X: np.ndarray) -> np.ndarray:
        out = np.empty_like(X)
        for i, p in enumerate(self.problems):
            out[i] = p.grad_smooth(X[i])
        return out

    def objective(self, X: np.ndarray) -> np.ndarray:
        return np.array([p.objective(X[i]) for i, p in enumerate(self.problems)])

    def prox(self, V: np.ndarray, P: np.ndarray) -> np.ndarray:
        out = np.empty_like(V)
        for i, p in enumerate(self.problems):
            out[i] = prox_composite(p.reg, V[i], P[i], p.lam)
        return out
