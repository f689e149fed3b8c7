"""Meta-training of the learned optimizer with truncated BPTT.

Each minibatch draws fresh optimizees, unrolls the scheme for K steps split
into equal segments, and backpropagates the loss mean_k F(y_k) segment by
segment with the carried state (x, y, hidden) detached at the boundaries.
Segment gradients are summed, so the whole-minibatch gradient equals the
truncated-BPTT gradient of the full unroll; a single Adam step follows.
The forward trajectory is therefore independent of the segment count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learned
from .densecore import named_stream
from .problems import (BatchedProblems, CompositeProblem, generate_lasso,
                       generate_logistic)
from .tape import Tape


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, minibatch: int, detail: str):
        super().__init__(f"non-finite value at minibatch {minibatch}: {detail}")
        self.minibatch = minibatch


class CheckpointError(ValueError):
    """Checkpoint files are inconsistent with their declared layout."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    unroll: int = 100
    segments: int = 5
    minibatches: int = 500
    meta_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    kind: str = "lasso"  # lasso | logistic
    m: int = 250
    n: int = 500
    sparsity: int = 50
    lam: float = 0.1
    preset: str = "PA"
    hidden_size: int = 20
    num_layers: int = 2
    preprocess_inputs: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.segments < 1 or self.unroll % self.segments != 0:
            raise ValueError("segments must divide unroll")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)  # per-minibatch meta-loss
    grad_norms: list[float] = field(default_factory=list)  # pre-clip global norms
    wall_time: float = 0.0
    checkpoint_path: str | None = None
    config: dict = field(default_factory=dict)


class AdamState:
    def __init__(self, weights: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def step(self, weights: dict, grads: dict, order) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key in order:
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / bc1
            vhat = self.v[key] / bc2
            weights[key] = weights[key] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _clip_global(grads: dict, order, max_norm: float) -> float:
    total = 0.0
    for key in order:
        total += float(np.sum(grads[key] * grads[key]))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for key in order:
            grads[key] = grads[key] * scale
    return norm


def generate_training_batch(cfg: TrainConfig, minibatch: int) -> list[CompositeProblem]:
    """Fresh optimizees; every (minibatch, instance) pair has its own stream."""
    out = []
    for i in range(cfg.batch_size):
        rng = named_stream(cfg.seed, f"train/mb{minibatch}/inst{i}")
        if cfg.kind == "lasso":
            inst = generate_lasso(rng, cfg.m, cfg.n, cfg.sparsity, cfg.lam)
            out.append(CompositeProblem.from_lasso(inst))
        elif cfg.kind == "logistic":
            inst = generate_logistic(rng, cfg.m, cfg.n, cfg.sparsity, cfg.lam)
            out.append(CompositeProblem.from_logistic(inst))
        else:
            raise ValueError(f"unknown problem kind {cfg.kind!r}")
    return out


def unroll_gradients(params: learned.LearnedOptimizerParams, bp: BatchedProblems,
                     unroll: int, segments: int):
    """Truncated-BPTT gradients of the loss (1/K) sum_k mean_b F_b(y_k).

    Returns (loss, grads).  Parameters stay fixed across segments; segment
    contributions are summed so the result is the gradient of the full
    unroll with state detached at segment boundaries.
    """
    if unroll % segments != 0:
        raise ValueError("segments must divide unroll")
    seg_len = unroll // segments
    scale = 1.0 / (unroll * bp.count)
    keys = params.trainable_keys()
    grads = {k: np.zeros_like(params.weights[k]) for k in keys}
    loss_total = 0.0
    carry = None
    for seg in range(segments):
        tape = Tape()
        weight_vars = {k: tape.param(params.weights[k], k) for k in keys}
        if carry is None:
            state = learned.initial_state(params, bp, tape, weight_vars)
        else:
            x, y, hidden = carry
            state = learned.RolloutState(
                x=tape.constant(x), y=tape.constant(y),
                hidden=[(tape.constant(h), tape.constant(c)) for h, c in hidden])
        out = learned.rollout_batch(bp, params, seg_len, eng=tape, state=state,
                                    weight_vars=weight_vars, want_loss=True)
        loss_node = tape.scale(out["loss_sum"], scale)
        seg_grads = tape.backward(loss_node)
        for k in keys:
            grads[k] += seg_grads[k]
        loss_total += float(tape.value(loss_node))
        end = out["state"]
        carry = (np.asarray(tape.value(end.x)), np.asarray(tape.value(end.y)),
                 [(np.asarray(tape.value(h)), np.asarray(tape.value(c)))
                  for h, c in end.hidden])
    return loss_total, grads


def train(cfg: TrainConfig, checkpoint_path=None, log_every: int = 0):
    """Meta-train per the config; returns (params, TrainReport)."""
    ablation = learned.ablation_preset(cfg.preset)
    params = learned.init_params(ablation, cfg.seed, cfg.hidden_size,
                                 cfg.num_layers, cfg.preprocess_inputs)
    keys = params.trainable_keys()
    adam = AdamState(params.weights, cfg.meta_lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport(config=cfg.to_dict())
    t0 = time.perf_counter()
    for mb in range(cfg.minibatches):
        bp = BatchedProblems(generate_training_batch(cfg, mb))
        loss, grads = unroll_gradients(params, bp, cfg.unroll, cfg.segments)
        if not np.isfinite(loss) or any(not np.all(np.isfinite(grads[k])) for k in keys):
            norms = {k: float(np.linalg.norm(params.weights[k])) for k in keys}
            raise NumericAbort(mb, f"loss={loss}, parameter norms={norms}")
        norm = _clip_global(grads, keys, cfg.clip_norm)
        adam.step(params.weights, grads, keys)
        report.losses.append(loss)
        report.grad_norms.append(norm)
        if log_every and (mb % log_every == 0 or mb == cfg.minibatches - 1):
            print(f"minibatch {mb:4d}  meta-loss {loss:.6e}  grad-norm {norm:.3e}")
    report.wall_time = time.perf_counter() - t0
    params.meta = {"trained": True, "config": cfg.to_dict(),
                   "final_loss": report.losses[-1] if report.losses else None}
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return params, report


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _ablation_to_json(ab: learned.AblationConfig) -> dict:
    return {
        "name": ab.name,
        "modes": {c: {"learnable": m.learnable, "fixed": m.fixed}
                  for c, m in ab.modes.items()},
    }


def _ablation_from_json(d: dict) -> learned.AblationConfig:
    modes = {c: learned.ChannelMode(m["learnable"], m.get("fixed"))
             for c, m in d["modes"].items()}
    return learned.AblationConfig(d["name"], modes)


def save_checkpoint(params: learned.LearnedOptimizerParams, path) -> None:
    """Directory with model.json (architecture + channel modes) and
    weights.bin (little-endian float64 arrays in layout order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "hidden_size": params.hidden_size,
        "num_layers": params.num_layers,
        "preprocess_inputs": params.preprocess_inputs,
        "seed": params.seed,
        "ablation": _ablation_to_json(params.ablation),
        "activations": {c: learned.HEAD_ACTIVATIONS[c]
                        for c in params.ablation.channels()},
        "layout": [[key, list(shape)] for key, shape in params.layout()],
        "param_count": params.param_count(),
        "training": params.meta,
    }
    with open(path / "model.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(path / "weights.bin", "wb") as fh:
        for key, shape in params.layout():
            w = params.weights[key]
            if tuple(w.shape) != tuple(shape):
                raise CheckpointError(f"{key} has shape {w.shape}, layout says {shape}")
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path, expect_preset: str | None = None) -> learned.LearnedOptimizerParams:
    path = Path(path)
    mpath = path / "model.json"
    if not mpath.exists():
        raise CheckpointError(f"missing model.json under {path}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    ablation = _ablation_from_json(manifest["ablation"])
    if expect_preset is not None and ablation.name.upper() != expect_preset.upper():
        raise CheckpointError(
            f"checkpoint was trained with preset {ablation.name}, expected {expect_preset}")
    params = learned.LearnedOptimizerParams(
        kind=manifest["kind"], hidden_size=int(manifest["hidden_size"]),
        num_layers=int(manifest["num_layers"]), ablation=ablation, weights={},
        seed=int(manifest["seed"]),
        preprocess_inputs=bool(manifest.get("preprocess_inputs", False)),
        meta=manifest.get("training") or {})
    layout = params.layout()
    declared = [[key, list(shape)] for key, shape in layout]
    if manifest.get("layout") != declared:
        raise CheckpointError("declared layout does not match the architecture; "
                              "refusing to load into a different channel layout")
    raw = np.fromfile(path / "weights.bin", dtype="<f8")
    expected = params.param_count()
    if raw.size != expected:
        raise CheckpointError(f"weights.bin holds {raw.size} values, expected {expected}")
    off = 0
    for key, shape in layout:
        size = int(np.prod(shape))
        params.weights[key] = raw[off:off + size].reshape(shape).copy()
        off += size
    return params
