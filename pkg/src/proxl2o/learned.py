"""Learned update rules built around preconditioned proximal steps.

A shared two-layer LSTM runs independently on every coordinate, reading the
coordinate's current value and smooth-part gradient; an affine head maps the
top hidden state to the learnable coefficient channels:

    p  (> 0, softplus)      per-coordinate preconditioner / step size
    a  ((0,1), sigmoid)     per-coordinate momentum (accelerator)
    b  ((0,1), sigmoid)     balance between the x-track and y-track steps
    b1 (identity)           additive bias inside the prox argument
    b2 (identity)           additive bias on the momentum track

The structured step is

    xhat = x - p * grad_f(x)
    yhat = y - p * grad_f(y)
    x+   = prox_{r,p}((1 - b) * xhat + b * yhat - b1)
    y+   = x+ + a * (x+ - x) + b2

Fixing channels yields the ablation presets; the simplified scheme keeps
only p and a (b = 1, b1 = b2 = 0).  A generic black-box baseline with the
same LSTM trunk emits a raw update direction d and steps x+ = x - d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .densecore import named_stream
from .prox import R_L1, R_NONNEG, R_SIMPLEX, R_ZERO
from .problems import SMOOTH_LASSO, BatchedProblems, CompositeProblem
from .tape import EAGER, Tape, Var

CHANNELS_STRUCTURED = ("p", "a", "b", "b1", "b2")
CHANNELS_GENERIC = ("d",)
HEAD_ACTIVATIONS = {"p": "softplus", "a": "sigmoid", "b": "sigmoid",
                    "b1": "identity", "b2": "identity", "d": "identity"}
INV_LIPSCHITZ = "1/L"


@dataclass(frozen=True)
class ChannelMode:
    learnable: bool
    fixed: float | str | None = None  # float or "1/L"; None when learnable


@dataclass(frozen=True)
class AblationConfig:
    name: str
    modes: dict

    def channels(self):
        return CHANNELS_GENERIC if "d" in self.modes else CHANNELS_STRUCTURED

    def learnable(self):
        return tuple(c for c in self.channels() if self.modes[c].learnable)


def _preset(name, **fixed) -> AblationConfig:
    modes = {}
    for c in CHANNELS_STRUCTURED:
        if c in fixed:
            modes[c] = ChannelMode(False, fixed[c])
        else:
            modes[c] = ChannelMode(True)
    return AblationConfig(name, modes)


ABLATION_PRESETS = {
    "PBA12": _preset("PBA12"),
    "PBA1": _preset("PBA1", b2=0.0),
    "PBA2": _preset("PBA2", b1=0.0),
    "PBA": _preset("PBA", b1=0.0, b2=0.0),
    "PA": _preset("PA", b=1.0, b1=0.0, b2=0.0),
    "P": _preset("P", a=0.0, b=1.0, b1=0.0, b2=0.0),
    "A": AblationConfig("A", {
        "p": ChannelMode(False, INV_LIPSCHITZ),
        "a": ChannelMode(True),
        "b": ChannelMode(False, 1.0),
        "b1": ChannelMode(False, 0.0),
        "b2": ChannelMode(False, 0.0),
    }),
    "GENERIC": AblationConfig("GENERIC", {"d": ChannelMode(True)}),
}


def ablation_preset(name: str) -> AblationConfig:
    key = name.upper()
    if key not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation preset {name!r}; "
                         f"choose from {', '.join(ABLATION_PRESETS)}")
    return ABLATION_PRESETS[key]


@dataclass
class StructuredCoeffs:
    """One iteration's coefficient vectors, each shaped (batch, dim)."""
    p: object = None
    a: object = None
    b: object = None
    b1: object = None
    b2: object = None
    d: object = None

    def get(self, name):
        return getattr(self, name)


@dataclass
class RolloutState:
    x: object  # (B, n) array or Var
    y: object
    hidden: list  # per layer: (h, c), each (B*n, H) array or Var


@dataclass
class LearnedOptimizerParams:
    kind: str  # "structured" | "generic"
    hidden_size: int
    num_layers: int
    ablation: AblationConfig
    weights: dict
    seed: int
    preprocess_inputs: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def input_size(self) -> int:
        return 4 if self.preprocess_inputs else 2

    def layout(self):
        """Weight keys in checkpoint order, with shapes."""
        h = self.hidden_size
        order = []
        for layer in range(self.num_layers):
            d_in = self.input_size if layer == 0 else h
            order.append((f"lstm{layer}.W", (d_in, 4 * h)))
            order.append((f"lstm{layer}.U", (h, 4 * h)))
            order.append((f"lstm{layer}.b", (4 * h,)))
        n_out = len(self.ablation.learnable())
        order.append(("head.W", (h, n_out)))
        order.append(("head.b", (n_out,)))
        order.append(("h0", (self.num_layers, h)))
        order.append(("c0", (self.num_layers, h)))
        return order

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def trainable_keys(self):
        return [key for key, _ in self.layout()]

    def copy(self) -> "LearnedOptimizerParams":
        return LearnedOptimizerParams(
            kind=self.kind, hidden_size=self.hidden_size, num_layers=self.num_layers,
            ablation=self.ablation, weights={k: v.copy() for k, v in self.weights.items()},
            seed=self.seed, preprocess_inputs=self.preprocess_inputs,
            meta=dict(self.meta))


INITIAL_P = 0.1  # head bias for the p channel starts at softplus^-1 of this


def init_params(ablation: AblationConfig, seed: int, hidden_size: int = 20,
                num_layers: int = 2, preprocess_inputs: bool = False) -> LearnedOptimizerParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias +1, and
    stored-once Gaussian initial hidden state (std 0.1).

    The p-channel head bias is pinned so the untrained scheme starts as a
    conservative preconditioned PGD (p around INITIAL_P); softplus(0) would
    exceed 2/L on the standard recipes and make the first rollouts diverge.
    """
    kind = "generic" if "d" in ablation.modes else "structured"
    params = LearnedOptimizerParams(kind=kind, hidden_size=hidden_size,
                                    num_layers=num_layers, ablation=ablation,
                                    weights={}, seed=seed,
                                    preprocess_inputs=preprocess_inputs)
    bound = 1.0 / np.sqrt(hidden_size)
    lstm_rng = named_stream(seed, "init/lstm")
    head_rng = named_stream(seed, "init/head")
    h0_rng = named_stream(seed, "init/h0")
    h = hidden_size
    for key, shape in params.layout():
        size = int(np.prod(shape))
        if key in ("h0", "c0"):
            w = 0.1 * h0_rng.normal(size).reshape(shape)
        elif key.startswith("head"):
            w = (head_rng.uniform(size) * 2.0 - 1.0).reshape(shape) * bound
            if key == "head.b":
                for j, name in enumerate(ablation.learnable()):
                    if name == "p":
                        w[j] = np.log(np.expm1(INITIAL_P))
        else:
            w = (lstm_rng.uniform(size) * 2.0 - 1.0).reshape(shape) * bound
            if key.endswith(".b"):
                w[h:2 * h] += 1.0  # forget gate opens by default
        params.weights[key] = w
    return params


# -- forward pass ------------------------------------------------------------------


def _lstm_cell(eng, W, U, b, inp, h, c, hidden_size):
    """Fused-gate LSTM cell; gate order (input, forget, cell, output)."""
    H = hidden_size
    z = eng.add(eng.add(eng.matmul(inp, W), eng.matmul(h, U)), b)
    gi = eng.sigmoid(eng.slice_cols(z, 0, H))
    gf = eng.sigmoid(eng.slice_cols(z, H, 2 * H))
    gc = eng.tanh(eng.slice_cols(z, 2 * H, 3 * H))
    go = eng.sigmoid(eng.slice_cols(z, 3 * H, 4 * H))
    c_new = eng.add(eng.mul(gf, c), eng.mul(gi, gc))
    h_new = eng.mul(go, eng.tanh(c_new))
    return h_new, c_new


def _preprocess_detached(eng, v, scale=10.0):
    """Log-and-sign encoding of a detached input value (two columns)."""
    raw = np.asarray(eng.value(v), dtype=np.float64)
    mag = np.where(np.abs(raw) >= np.exp(-scale),
                   np.log(np.abs(raw) + 1e-300) / scale, -1.0)
    sgn = np.clip(raw * np.exp(scale), -1.0, 1.0)
    return eng.constant(mag), eng.constant(sgn)


def initial_hidden(params: LearnedOptimizerParams, n_coords: int, eng=EAGER,
                   weight_vars=None):
    """Broadcast the stored h0/c0 rows across coordinates."""
    w = weight_vars if weight_vars is not None else params.weights
    hidden = []
    for layer in range(params.num_layers):
        h_l = eng.tile_rows(_row(eng, w["h0"], layer), n_coords)
        c_l = eng.tile_rows(_row(eng, w["c0"], layer), n_coords)
        hidden.append((h_l, c_l))
    return hidden


def _row(eng, mat, i):
    """Row i of a (layers, H) parameter as a length-H vector."""
    if isinstance(mat, Var):
        H = mat.value.shape[1]
        flat = eng.reshape(mat, (1, -1))
        return eng.reshape(eng.slice_cols(flat, i * H, (i + 1) * H), (-1,))
    return np.asarray(mat)[i]


def lstm_mlp_forward(params: LearnedOptimizerParams, x, g, hidden, eng=EAGER,
                     weight_vars=None):
    """Shared coordinate-wise trunk: raw head channels plus new hidden state.

    x, g: (B, n) values or Vars.  Returns ({channel: (B, n)}, hidden').
    """
    w = weight_vars if weight_vars is not None else params.weights
    xv = eng.value(x)
    batch, n = np.shape(xv)
    N = batch * n
    x_flat = eng.reshape(x, (-1,))
    g_flat = eng.reshape(g, (-1,))
    if params.preprocess_inputs:
        cols = [*_preprocess_detached(eng, x_flat), *_preprocess_detached(eng, g_flat)]
    else:
        cols = [x_flat, g_flat]
    inp = eng.stack_cols(cols)
    new_hidden = []
    for layer in range(params.num_layers):
        h_l, c_l = hidden[layer]
        h_new, c_new = _lstm_cell(eng, w[f"lstm{layer}.W"], w[f"lstm{layer}.U"],
                                  w[f"lstm{layer}.b"], inp, h_l, c_l,
                                  params.hidden_size)
        new_hidden.append((h_new, c_new))
        inp = h_new
    out = eng.add(eng.matmul(inp, w["head.W"]), w["head.b"])
    raw = {}
    for j, name in enumerate(params.ablation.learnable()):
        raw[name] = eng.reshape(eng.slice_cols(out, j, j + 1), (batch, n))
    return raw, new_hidden


def _activate(eng, name, raw):
    act = HEAD_ACTIVATIONS[name]
    if act == "softplus":
        return eng.softplus(raw)
    if act == "sigmoid":
        return eng.sigmoid(raw)
    return raw


def resolve_coeffs(params: LearnedOptimizerParams, bp: BatchedProblems, raw,
                   eng=EAGER) -> StructuredCoeffs:
    """Apply head activations and fill fixed channels with their constants."""
    shape = (bp.count, bp.dim)
    coeffs = StructuredCoeffs()
    for name in params.ablation.channels():
        mode = params.ablation.modes[name]
        if mode.learnable:
            setattr(coeffs, name, _activate(eng, name, raw[name]))
        elif mode.fixed == INV_LIPSCHITZ:
            setattr(coeffs, name,
                    np.broadcast_to((1.0 / bp.lipschitz())[:, None], shape))
        else:
            setattr(coeffs, name, np.full(shape, float(mode.fixed)))
    return coeffs


# -- update steps ----------------------------------------------------------------


def _check_positive_p(eng, p):
    val = np.asarray(eng.value(p))
    if np.any(val <= 0.0):
        raise ValueError("preconditioner must be strictly positive")


def grad_ops(eng, bp: BatchedProblems, X):
    """Smooth-part gradient as engine ops, differentiable through X."""
    if bp.smooth == SMOOTH_LASSO:
        return eng.bmv_t(bp.mats, eng.sub(eng.bmv(bp.mats, X), bp.vecs))
    z = eng.bmv(bp.mats, X)
    return eng.scale(eng.bmv_t(bp.mats, eng.sub(eng.sigmoid(z), bp.vecs)), 1.0 / bp.m)


def subgrad_ops(eng, bp: BatchedProblems, X):
    """Subgradient of F; the l1 sign term enters as a detached constant."""
    g = grad_ops(eng, bp, X)
    if bp.reg == R_L1:
        sgn = np.sign(np.asarray(eng.value(X)))
        return eng.add(g, sgn * bp.lam[:, None])
    if bp.reg == R_ZERO:
        return g
    raise ValueError(f"subgradient oracle undefined for tag {bp.reg!r}")


def prox_ops(eng, bp: BatchedProblems, V, P):
    """prox_{r,p} as engine ops; simplex projection is inference-only."""
    if bp.reg == R_ZERO:
        return V
    if bp.reg == R_L1:
        return eng.soft_threshold(V, eng.mul(P, bp.lam[:, None]))
    if bp.reg == R_NONNEG:
        return eng.nonneg(V)
    if bp.reg == R_SIMPLEX:
        if isinstance(V, Var):
            raise ValueError("simplex prox cannot be differentiated on the tape")
        return bp.prox(np.asarray(V), np.asarray(eng.value(P)))
    raise ValueError(f"unknown nonsmooth tag {bp.reg!r}")


def objective_sum_ops(eng, bp: BatchedProblems, X):
    """Sum over the batch of F(x); indicator parts contribute zero on the
    feasible iterates produced by the prox."""
    if bp.smooth == SMOOTH_LASSO:
        resid = eng.sub(eng.bmv(bp.mats, X), bp.vecs)
        f = eng.scale(eng.sum(eng.square(resid)), 0.5)
    else:
        z = eng.bmv(bp.mats, X)
        per_sample = eng.sub(eng.softplus(z), eng.mul(bp.vecs, z))
        f = eng.scale(eng.sum(per_sample), 1.0 / bp.m)
    if bp.reg == R_L1:
        return eng.add(f, eng.sum(eng.mul(eng.abs(X), bp.lam[:, None])))
    return f


def structured_step(bp: BatchedProblems, state: RolloutState,
                    coeffs: StructuredCoeffs, eng=EAGER, grad_x=None) -> RolloutState:
    """Full structured update; see the module docstring for the equations."""
    _check_positive_p(eng, coeffs.p)
    gx = grad_x if grad_x is not None else grad_ops(eng, bp, state.x)
    gy = grad_ops(eng, bp, state.y)
    xhat = eng.sub(state.x, eng.mul(coeffs.p, gx))
    yhat = eng.sub(state.y, eng.mul(coeffs.p, gy))
    mix = eng.sub(eng.add(eng.mul(eng.sub(1.0, coeffs.b), xhat),
                          eng.mul(coeffs.b, yhat)), coeffs.b1)
    x_new = prox_ops(eng, bp, mix, coeffs.p)
    y_new = eng.add(eng.add(x_new, eng.mul(coeffs.a, eng.sub(x_new, state.x))),
                    coeffs.b2)
    return RolloutState(x=x_new, y=y_new, hidden=state.hidden)


def l2o_pa_step(bp: BatchedProblems, state: RolloutState, p, a, eng=EAGER) -> RolloutState:
    """Simplified scheme: x+ = prox_{r,p}(y - p grad_f(y)); y+ = x+ + a (x+ - x)."""
    _check_positive_p(eng, p)
    gy = grad_ops(eng, bp, state.y)
    x_new = prox_ops(eng, bp, eng.sub(state.y, eng.mul(p, gy)), p)
    y_new = eng.add(x_new, eng.mul(a, eng.sub(x_new, state.x)))
    return RolloutState(x=x_new, y=y_new, hidden=state.hidden)


def generic_step(bp: BatchedProblems, state: RolloutState, d, eng=EAGER) -> RolloutState:
    """Black-box baseline: x+ = x - d with a raw learned direction."""
    x_new = eng.sub(state.x, d)
    return RolloutState(x=x_new, y=x_new, hidden=state.hidden)


# -- rollouts -------------------------------------------------------------------


def initial_state(params: LearnedOptimizerParams, bp: BatchedProblems, eng=EAGER,
                  weight_vars=None) -> RolloutState:
    zeros = np.zeros((bp.count, bp.dim))
    return RolloutState(x=eng.constant(zeros.copy()), y=eng.constant(zeros.copy()),
                        hidden=initial_hidden(params, bp.count * bp.dim, eng,
                                              weight_vars))


def rollout_batch(bp: BatchedProblems, params: LearnedOptimizerParams, K: int,
                  eng=EAGER, state: RolloutState | None = None,
                  weight_vars=None, want_objectives: bool = False,
                  want_traces: bool = False, want_loss: bool = False):
    """Run K steps of the learned scheme over a batch of problems.

    Returns a dict with the final state plus, on request: per-step
    objectives (K+1, B) of the tracked iterate, per-channel coefficient
    norm traces, and the on-tape sum of batch objectives over all steps
    (unscaled; callers divide by K*B).
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if state is None:
        state = initial_state(params, bp, eng, weight_vars)
    objectives = []
    traces = {c: [] for c in params.ablation.channels()} if want_traces else None
    loss_acc = None
    if want_objectives:
        objectives.append(bp.objective(np.asarray(eng.value(state.y))))
    for _ in range(K):
        gx = grad_ops(eng, bp, state.x)
        if params.kind == "generic":
            g_in = subgrad_ops(eng, bp, state.x)
        else:
            g_in = gx
        raw, hidden = lstm_mlp_forward(params, state.x, g_in, state.hidden, eng,
                                       weight_vars)
        coeffs = resolve_coeffs(params, bp, raw, eng)
        if params.kind == "generic":
            state = generic_step(bp, state, coeffs.d, eng)
            tracked = state.x
        else:
            state = structured_step(bp, state, coeffs, eng, grad_x=gx)
            tracked = state.y
        state.hidden = hidden
        if want_traces:
            for c in params.ablation.channels():
                vals = np.asarray(eng.value(coeffs.get(c)))
                traces[c].append(float(np.mean(np.linalg.norm(vals, axis=1))))
        if want_objectives:
            objectives.append(bp.objective(np.asarray(eng.value(tracked))))
        if want_loss:
            step_loss = objective_sum_ops(eng, bp, tracked)
            loss_acc = step_loss if loss_acc is None else eng.add(loss_acc, step_loss)
    return {
        "state": state,
        "objectives": np.array(objectives) if want_objectives else None,
        "traces": traces,
        "loss_sum": loss_acc,
    }


def rollout(problem: CompositeProblem, params: LearnedOptimizerParams, K: int,
            tape: Tape | None = None):
    """Single-problem rollout from x0 = 0; returns (ConvergenceRecord, loss).

    The loss is the training objective mean_k F(y_k); with a tape given it
    is returned as a Var ready for backward().
    """
    from .classic import ConvergenceRecord  # local import to avoid a cycle at module load

    eng = tape if tape is not None else EAGER
    bp = BatchedProblems([problem])
    weight_vars = None
    if tape is not None:
        weight_vars = {k: tape.param(params.weights[k], k) for k in params.trainable_keys()}
    out = rollout_batch(bp, params, K, eng=eng, weight_vars=weight_vars,
                        want_objectives=True, want_loss=K > 0)
    rec = ConvergenceRecord()
    for k in range(K + 1):
        rec.log(k, float(out["objectives"][k][0]))
    rec.solution = np.asarray(eng.value(out["state"].x))[0]
    if K == 0:
        return rec, 0.0
    loss = eng.scale(out["loss_sum"], 1.0 / K)
    return rec, loss


def fista_momentum_schedule(K: int) -> np.ndarray:
    """a_k = (t_k - 1) / t_{k+1} with t_0 = 1."""
    a = np.empty(K)
    t = 1.0
    for k in range(K):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        a[k] = (t - 1.0) / t_next
        t = t_next
    return a


def fista_coeffs(bp: BatchedProblems, k: int, schedule: np.ndarray) -> StructuredCoeffs:
    """Coefficients that reduce the structured scheme to constant-step FISTA."""
    shape = (bp.count, bp.dim)
    inv_l = np.broadcast_to((1.0 / bp.lipschitz())[:, None], shape)
    return StructuredCoeffs(
        p=inv_l,
        a=np.full(shape, schedule[k]),
        b=np.ones(shape),
        b1=np.zeros(shape),
        b2=np.zeros(shape),
    )
