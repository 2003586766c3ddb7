"""AdamW, warmup + cosine learning rate, global-norm clipping, and phase training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as tn
from .diffusion import LatentBatch, NoiseSchedule, ToyUNet, training_loss
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class AdamWState:
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    lr_peak: float = 1e-4

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    warmup_steps: int = 100
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState, lr: float) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.name} {p.shape}")
        key = p.name
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros(p.shape)
            state.v[key] = np.zeros(p.shape)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * update


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup from 0 to lr_peak, then cosine decay to 0 at total_steps."""
    w, s = sched.warmup_steps, sched.total_steps
    if not 0 <= step <= s:
        raise ValueError(f"step {step} outside [0, {s}]")
    if step < w:
        return sched.lr_peak * step / w
    if s == w:
        return sched.lr_peak
    return sched.lr_peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (s - w)))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        f = max_norm / norm
        return [g * f for g in grads], norm
    return [g.copy() for g in grads], norm


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float


def train_phase(model: ToyUNet, batches: Iterator[LatentBatch], cfg: TrainConfig, trainable: Sequence[str],
                sched: NoiseSchedule, state: AdamWState | None = None, start_step: int = 0,
                on_step: Callable[[int, AdamWState], None] | None = None,
                ) -> tuple[ToyUNet, list[TraceRow], AdamWState]:
    """loss -> backward -> clip -> AdamW for steps start_step+1 .. cfg.steps.

    Only parameters named in ``trainable`` change; the rest stay bitwise
    identical. Returns the model, the per-step loss trace and optimizer state.
    """
    params = model.named_parameters()
    trainable = list(trainable)
    missing = [n for n in trainable if n not in params]
    if missing:
        raise ConfigError(f"unknown trainable parameters {missing}")
    if not trainable and cfg.steps > start_step:
        raise ConfigError("no trainable parameters for a non-empty training phase")
    if state is None:
        state = AdamWState(lr_peak=cfg.lr_peak, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                           beta2=cfg.beta2, eps=cfg.adam_eps)
    lrs = LrSchedule(cfg.warmup_steps, cfg.steps, cfg.lr_peak)
    chosen = [params[n] for n in trainable]
    frozen = [t for n, t in params.items() if n not in set(trainable)]
    trace = []
    for step in range(start_step + 1, cfg.steps + 1):
        batch = next(batches)
        model.zero_grad()
        for t in frozen:
            t.requires_grad = False
        try:
            loss = training_loss(batch, model, sched, mode="train")
            if loss.requires_grad:
                tn.backward(loss)
            else:
                tn.get_tape().reset()
        finally:
            for t in frozen:
                t.requires_grad = True
        grads = [np.zeros(t.shape) if t.grad is None else t.grad for t in chosen]
        grads, _ = clip_grad_norm(grads, cfg.clip_norm)
        lr = lr_at(step, lrs)
        adamw_step(chosen, grads, state, lr)
        trace.append(TraceRow(step, lr, loss.item()))
        if on_step is not None:
            on_step(step, state)
    model.zero_grad()
    return model, trace, state
