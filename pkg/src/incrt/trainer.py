"""Loss, AdamW and the training loop that drives the controller."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Union

import numpy as np

from .attention import LayerState, ModelState, backward, model_forward, model_residual
from .controller import (
    ControllerConfig,
    ControllerState,
    ModelContext,
    OperatorContext,
    controller_step,
)
from .tasks import OperatorTaskSpec, SequenceTaskSpec, operator_task, sequence_task

TRACE_HEADER = ("step", "loss", "acc", "gamma_res", "lambda_max", "lambda_min", "heads", "W", "params")


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be batch x classes with one label per row")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    loss = -float(logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class OptimizerState:
    """AdamW with per-tensor moments and per-tensor bias-correction counters."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    slots: dict = field(default_factory=dict)

    def register(self, name: str, tensor: np.ndarray) -> None:
        self.slots[name] = _Moments(np.zeros_like(tensor), np.zeros_like(tensor))

    def discard(self, name: str) -> None:
        self.slots.pop(name, None)


def adamw_step(opt: OptimizerState, tensors: dict, grads: dict) -> None:
    """In-place decoupled-weight-decay Adam update of every tensor with a gradient."""
    for name, g in grads.items():
        if name not in opt.slots:
            raise KeyError(f"tensor {name!r} is not registered with the optimizer")
        p = tensors[name]
        s = opt.slots[name]
        s.t += 1
        s.m = opt.beta1 * s.m + (1 - opt.beta1) * g
        s.v = opt.beta2 * s.v + (1 - opt.beta2) * g * g
        m_hat = s.m / (1 - opt.beta1**s.t)
        v_hat = s.v / (1 - opt.beta2**s.t)
        p *= 1 - opt.lr * opt.weight_decay
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 10
    steps_per_epoch: int = 100
    seed: int = 0
    eval_every: int = 50
    eval_size: int = 256
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("lr, batch_size and steps_per_epoch must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("trace steps must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in TRACE_HEADER])


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, dump):
        super().__init__(f"non-finite loss at step {step}: {dump}")
        self.step = step
        self.dump = dump


CtrlSpec = Union[ControllerConfig, Callable[[float], ControllerConfig]]


def _resolve_cfg(ctrl_cfg: CtrlSpec, gamma0: float) -> ControllerConfig:
    return ctrl_cfg if isinstance(ctrl_cfg, ControllerConfig) else ctrl_cfg(gamma0)


def accuracy(model: ModelState, tokens, labels) -> float:
    return float((model_forward(tokens, model).argmax(axis=1) == labels).mean())


def _operator_loop(layer: LayerState, task: OperatorTaskSpec, tc: TrainConfig, ctrl_cfg: CtrlSpec):
    trace, state = RunTrace(), ControllerState()
    if tc.max_epochs == 0:
        return layer, trace, state, None
    first = task.phases[0].start_epoch
    ctx = OperatorContext(layer, operator_task(task, first))
    gamma0 = float(np.linalg.norm(ctx.residual()))
    cfg = _resolve_cfg(ctrl_cfg, gamma0)
    state.gamma_ref = gamma0
    step = 0
    for epoch in range(first, first + tc.max_epochs):
        ctx.set_operator(operator_task(task, epoch))
        for _ in range(tc.steps_per_epoch):
            r = controller_step(ctx, cfg, state, step)
            s = r.summary
            trace.append(
                step=step,
                loss=float("nan"),
                acc=float("nan"),
                gamma_res=s.gamma_res,
                lambda_max=s.lambda_max,
                lambda_min=s.lambda_min,
                heads=len(layer.heads),
                W=r.W_t,
                params=0,
            )
            step += 1
    return layer, trace, state, cfg


def _sequence_loop(model: ModelState, task: SequenceTaskSpec, tc: TrainConfig, ctrl_cfg: CtrlSpec):
    trace, state = RunTrace(), ControllerState()
    if tc.max_epochs == 0:
        return model, trace, state, None
    opt = OptimizerState(lr=tc.lr, weight_decay=tc.weight_decay)
    for name, t in model.parameters().items():
        opt.register(name, t)
    ctx = ModelContext(model, opt, seed=tc.seed)
    val = sequence_task(task, tc.eval_size, rng_state=[tc.seed, 1 << 20])
    first = sequence_task(task, tc.batch_size, rng_state=[tc.seed, 0])
    gamma0 = float(np.linalg.norm(model_residual(model, first.tokens)))
    cfg = _resolve_cfg(ctrl_cfg, gamma0)
    state.gamma_ref = gamma0
    acc = float("nan")
    step = 0
    for epoch in range(tc.max_epochs):
        for _ in range(tc.steps_per_epoch):
            batch = first if step == 0 else sequence_task(task, tc.batch_size, rng_state=[tc.seed, step])
            ctx.set_batch(batch.tokens)
            out = {}

            def train(batch=batch, out=out):
                loss, grads, _ = backward(model, batch.tokens, batch.labels)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(step, {"heads": len(model.layer.heads), "loss": loss})
                adamw_step(opt, model.parameters(), grads)
                out["loss"] = loss
                return out

            r = controller_step(ctx, cfg, state, step, train=train)
            if step % tc.eval_every == 0 or step == tc.max_epochs * tc.steps_per_epoch - 1:
                acc = accuracy(model, val.tokens, val.labels)
            s = r.summary
            trace.append(
                step=step,
                loss=out.get("loss", float("nan")),
                acc=acc,
                gamma_res=s.gamma_res,
                lambda_max=s.lambda_max,
                lambda_min=s.lambda_min,
                heads=len(model.layer.heads),
                W=r.W_t,
                params=model.param_count(),
            )
            step += 1
    return model, trace, state, cfg


def train_loop(model, task, train_cfg: TrainConfig, ctrl_cfg: CtrlSpec):
    """Run the controller over a task.

    ``model`` is a LayerState for operator tasks or a ModelState for
    sequence tasks. ``ctrl_cfg`` is a ControllerConfig or a callable that
    builds one from the initial residual energy (measured on the first
    batch and frozen). Returns ``(model, trace, controller_state, cfg)``.
    """
    if isinstance(task, OperatorTaskSpec):
        return _operator_loop(model, task, train_cfg, ctrl_cfg)
    if isinstance(task, SequenceTaskSpec):
        return _sequence_loop(model, task, train_cfg, ctrl_cfg)
    raise TypeError(f"unknown task type {type(task).__name__}")


def relative_thresholds(theta_ratio: float = 0.4, phi_ratio: float = 0.05, **kw):
    return partial(ControllerConfig.from_reference, theta_ratio=theta_ratio, phi_ratio=phi_ratio, **kw)
