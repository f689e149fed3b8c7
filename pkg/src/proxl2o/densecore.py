"""Dense vector/matrix kernels, seeded random streams, and spectral utilities.

Everything here is float64 and deterministic.  Random streams are built on
the counter-based Philox generator keyed by (seed, stream_id), so the same
pair always reproduces the same sequence regardless of platform, thread
count, or what other streams were consumed in between.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


def as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return x


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    return a


def gemv(a, x) -> np.ndarray:
    """Matrix-vector product y_i = sum_j A_ij x_j."""
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"gemv: matrix is {a.shape}, vector has length {x.shape[0]}")
    return a @ x


def dot(x, y) -> float:
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ShapeError(f"dot: lengths {x.shape[0]} vs {y.shape[0]}")
    return float(x @ y)


def axpy(alpha: float, x, y) -> np.ndarray:
    """alpha * x + y."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ShapeError(f"axpy: lengths {x.shape[0]} vs {y.shape[0]}")
    return alpha * x + y


def stream_id_of(name: str) -> int:
    """Stable 64-bit stream id for a named substream."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Gaussian draws use the Box-Muller transform on Philox uniforms instead
    of numpy's ziggurat so the sequence depends only on IEEE-754 arithmetic,
    not on numpy's internal sampling tables.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return self._gen.random(int(n))

    def normal(self, n: int) -> np.ndarray:
        """n standard-normal draws via Box-Muller."""
        if n < 1:
            raise ValueError("n must be >= 1")
        half = (int(n) + 1) // 2
        u1 = self.uniform(half)
        u2 = self.uniform(half)
        # 1 - u1 lies in (0, 1], so the log is finite
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[: int(n)]

    def indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n), sorted."""
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        idx = np.arange(n)
        u = self.uniform(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            if j >= n:  # guard against float rounding at the top end
                j = n - 1
            idx[i], idx[j] = idx[j], idx[i]
        return np.sort(idx[:k])

    def spawn(self, name: str) -> "RngStream":
        """Child stream; id mixes this stream's id with the name."""
        return RngStream(self.seed, self.stream_id ^ stream_id_of(name))


def named_stream(seed: int, name: str) -> RngStream:
    return RngStream(seed, stream_id_of(name))


def sample_gaussian(rng: RngStream, n: int) -> np.ndarray:
    return rng.normal(n)


def spectral_norm_sq(a, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest squared singular value of A by power iteration on A^T A.

    Starts from the normalized all-ones vector; assumes the usual spectral
    gap of dense random matrices (see generator recipes).  Returns 0.0 for
    the zero matrix.
    """
    a = as_matrix(a)
    if not np.any(a):
        return 0.0
    n = a.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(max_iter):
        w = a.T @ (a @ v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            # start vector was in the nullspace; restart from a basis vector
            v = np.zeros(n)
            v[0] = 1.0
            continue
        v = w / nw
        if abs(nw - lam) <= tol * nw:
            return nw
        lam = nw
    return lam


def thread_count(requested: int | None = None) -> int:
    """Resolve the worker count: explicit value > env var > cpu count."""
    if requested is not None and requested > 0:
        return int(requested)
    env = os.environ.get("PROXL2O_THREADS")
    if env:
        try:
            v = int(env)
            if v > 0:
                return v
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Map preserving input order; results are independent of worker count."""
    items = list(items)
    workers = thread_count(threads)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
