"""Reverse-mode autodiff tape for unrolled optimizer training.

Nodes are vector-valued (whole numpy arrays) with closed-form vector-Jacobian
products, recorded in creation order and replayed exactly in reverse, so
gradient accumulation order is fixed and results are bit-reproducible.

The Eager engine exposes the same operations but just computes values; code
written against an engine runs in both training and inference mode.
"""

from __future__ import annotations

import numpy as np

from .prox import soft_threshold


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.logaddexp(0.0, z)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._vals[self.idx]


class Tape:
    """Node arena with parameter leaves and reverse-order backprop."""

    def __init__(self):
        self._vals: list = []
        self._bwds: list = []  # callable(gout) -> [(idx, grad), ...] or None
        self._param_ids: dict[str, int] = {}

    # -- node plumbing -----------------------------------------------------

    def _push(self, value, bwd=None) -> Var:
        self._vals.append(value)
        self._bwds.append(bwd)
        return Var(self, len(self._vals) - 1)

    def _wrap(self, x):
        """Coerce a raw array/scalar operand into a constant node."""
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self._push(np.asarray(x, dtype=np.float64))

    def constant(self, x) -> Var:
        return self._wrap(x)

    def param(self, x, key: str) -> Var:
        if key in self._param_ids:
            raise ValueError(f"parameter {key!r} already registered")
        v = self._push(np.asarray(x, dtype=np.float64))
        self._param_ids[key] = v.idx
        return v

    def value(self, x):
        return x.value if isinstance(x, Var) else x

    def detach(self, x) -> Var:
        """Value flows forward, gradient flow stops here."""
        return self._push(self.value(x))

    # -- arithmetic ----------------------------------------------------------

    def add(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        ash, bsh = np.shape(av), np.shape(bv)
        ai, bi = a.idx, b.idx
        return self._push(
            av + bv,
            lambda g: [(ai, _unbroadcast(g, ash)), (bi, _unbroadcast(g, bsh))],
        )

    def sub(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        ash, bsh = np.shape(av), np.shape(bv)
        ai, bi = a.idx, b.idx
        return self._push(
            av - bv,
            lambda g: [(ai, _unbroadcast(g, ash)), (bi, _unbroadcast(-g, bsh))],
        )

    def mul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        ash, bsh = np.shape(av), np.shape(bv)
        ai, bi = a.idx, b.idx
        return self._push(
            av * bv,
            lambda g: [(ai, _unbroadcast(g * bv, ash)), (bi, _unbroadcast(g * av, bsh))],
        )

    def scale(self, a, c: float) -> Var:
        a = self._wrap(a)
        ai = a.idx
        c = float(c)
        return self._push(a.value * c, lambda g: [(ai, g * c)])

    def matmul(self, a, w) -> Var:
        a, w = self._wrap(a), self._wrap(w)
        av, wv = a.value, w.value
        ai, wi = a.idx, w.idx
        return self._push(
            av @ wv,
            lambda g: [(ai, g @ wv.T), (wi, av.T @ g)],
        )

    def bmv(self, mats: np.ndarray, x) -> Var:
        """Batched matrix-vector product: (B,m,n) const x (B,n) -> (B,m).

        Looped per instance so the arithmetic path matches single-instance
        gemv bit for bit.
        """
        x = self._wrap(x)
        xv = x.value
        xi = x.idx
        out = np.empty((mats.shape[0], mats.shape[1]))
        for i in range(mats.shape[0]):
            out[i] = mats[i] @ xv[i]

        def bwd(g):
            gx = np.empty_like(xv)
            for i in range(mats.shape[0]):
                gx[i] = mats[i].T @ g[i]
            return [(xi, gx)]

        return self._push(out, bwd)

    def bmv_t(self, mats: np.ndarray, x) -> Var:
        """Batched transposed product: (B,m,n) const x (B,m) -> (B,n)."""
        x = self._wrap(x)
        xv = x.value
        xi = x.idx
        out = np.empty((mats.shape[0], mats.shape[2]))
        for i in range(mats.shape[0]):
            out[i] = mats[i].T @ xv[i]

        def bwd(g):
            gx = np.empty_like(xv)
            for i in range(mats.shape[0]):
                gx[i] = mats[i] @ g[i]
            return [(xi, gx)]

        return self._push(out, bwd)

    # -- elementwise nonlinearities -------------------------------------------

    def sigmoid(self, a) -> Var:
        a = self._wrap(a)
        ai = a.idx
        s = _sigmoid(a.value)
        return self._push(s, lambda g: [(ai, g * s * (1.0 - s))])

    def tanh(self, a) -> Var:
        a = self._wrap(a)
        ai = a.idx
        t = np.tanh(a.value)
        return self._push(t, lambda g: [(ai, g * (1.0 - t * t))])

    def softplus(self, a) -> Var:
        a = self._wrap(a)
        av = a.value
        ai = a.idx
        return self._push(_softplus(av), lambda g: [(ai, g * _sigmoid(av))])

    def soft_threshold(self, v, tau) -> Var:
        """sign(v) * max(0, |v| - tau); subderivative 0 on the kink |v| = tau."""
        v, tau = self._wrap(v), self._wrap(tau)
        vv, tv = v.value, tau.value
        vi, ti = v.idx, tau.idx
        tsh = np.shape(tv)
        out = soft_threshold(vv, tv)
        active = np.abs(vv) > tv
        sgn = np.sign(vv)

        def bwd(g):
            gv = np.where(active, g, 0.0)
            gt = _unbroadcast(np.where(active, -g * sgn, 0.0), tsh)
            return [(vi, gv), (ti, gt)]

        return self._push(out, bwd)

    def nonneg(self, a) -> Var:
        a = self._wrap(a)
        av = a.value
        ai = a.idx
        pos = av > 0.0
        return self._push(np.maximum(0.0, av), lambda g: [(ai, np.where(pos, g, 0.0))])

    def abs(self, a) -> Var:
        a = self._wrap(a)
        ai = a.idx
        sgn = np.sign(a.value)
        return self._push(np.abs(a.value), lambda g: [(ai, g * sgn)])

    def square(self, a) -> Var:
        a = self._wrap(a)
        av = a.value
        ai = a.idx
        return self._push(av * av, lambda g: [(ai, 2.0 * av * g)])

    # -- shape ops -------------------------------------------------------------

    def sum(self, a) -> Var:
        a = self._wrap(a)
        sh = np.shape(a.value)
        ai = a.idx
        return self._push(np.float64(np.sum(a.value)), lambda g: [(ai, np.full(sh, float(g)))])

    def reshape(self, a, shape) -> Var:
        a = self._wrap(a)
        old = np.shape(a.value)
        ai = a.idx
        return self._push(a.value.reshape(shape), lambda g: [(ai, np.reshape(g, old))])

    def stack_cols(self, cols) -> Var:
        """Stack 1-D vars into an (N, k) matrix, one column each."""
        cols = [self._wrap(c) for c in cols]
        ids = [c.idx for c in cols]
        out = np.stack([c.value for c in cols], axis=1)
        return self._push(out, lambda g: [(i, g[:, j]) for j, i in enumerate(ids)])

    def slice_cols(self, a, j0: int, j1: int) -> Var:
        a = self._wrap(a)
        sh = np.shape(a.value)
        ai = a.idx

        def bwd(g):
            z = np.zeros(sh)
            z[:, j0:j1] = g
            return [(ai, z)]

        return self._push(np.ascontiguousarray(a.value[:, j0:j1]), bwd)

    def tile_rows(self, v, n: int) -> Var:
        """Broadcast a length-H vector to an (n, H) matrix."""
        v = self._wrap(v)
        vi = v.idx
        return self._push(
            np.broadcast_to(v.value, (n, v.value.shape[0])),
            lambda g: [(vi, g.sum(axis=0))],
        )

    # -- backprop ---------------------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss with respect to every parameter leaf."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a Var recorded on this tape")
        if np.ndim(loss.value) != 0:
            raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        param_keys = {idx: key for key, idx in self._param_ids.items()}
        out = {}
        grads: list = [None] * (loss.idx + 1)
        grads[loss.idx] = np.float64(1.0)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            grads[i] = None  # free as we go
            if g is None:
                continue
            key = param_keys.get(i)
            if key is not None:
                out[key] = np.asarray(g, dtype=np.float64)
            bwd = self._bwds[i]
            if bwd is None:
                continue
            for j, gj in bwd(g):
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        for key, idx in self._param_ids.items():
            if key not in out:
                out[key] = np.zeros_like(self._vals[idx])
        return out


class Eager:
    """Value-only engine with the Tape's operation set."""

    def constant(self, x):
        return np.asarray(x, dtype=np.float64)

    def param(self, x, key):
        return np.asarray(x, dtype=np.float64)

    def value(self, x):
        return x

    def detach(self, x):
        return x

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def mul(self, a, b):
        return a * b

    def scale(self, a, c):
        return a * float(c)

    def matmul(self, a, w):
        return a @ w

    def bmv(self, mats, x):
        out = np.empty((mats.shape[0], mats.shape[1]))
        for i in range(mats.shape[0]):
            out[i] = mats[i] @ x[i]
        return out

    def bmv_t(self, mats, x):
        out = np.empty((mats.shape[0], mats.shape[2]))
        for i in range(mats.shape[0]):
            out[i] = mats[i].T @ x[i]
        return out

    def sigmoid(self, a):
        return _sigmoid(np.asarray(a, dtype=np.float64))

    def tanh(self, a):
        return np.tanh(a)

    def softplus(self, a):
        return _softplus(np.asarray(a, dtype=np.float64))

    def soft_threshold(self, v, tau):
        return soft_threshold(v, tau)

    def nonneg(self, a):
        return np.maximum(0.0, a)

    def abs(self, a):
        return np.abs(a)

    def square(self, a):
        return a * a

    def sum(self, a):
        return np.float64(np.sum(a))

    def reshape(self, a, shape):
        return np.reshape(a, shape)

    def stack_cols(self, cols):
        return np.stack(cols, axis=1)

    def slice_cols(self, a, j0, j1):
        return np.ascontiguousarray(a[:, j0:j1])

    def tile_rows(self, v, n):
        return np.broadcast_to(v, (n, v.shape[0]))


EAGER = Eager()
