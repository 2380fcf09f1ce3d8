"""Adam with decoupled weight decay, learning-rate schedules and a grad-norm monitor."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import ordered_sum
from .errors import ConfigError, ShapeMismatch, StepOutOfRange

SCHEDULE_KINDS = ("warmup_cosine", "warmup_linear", "constant")


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    base_lr: float = 0.001
    weight_decay: float = 0.0001
    grad_clip_norm: float | None = None

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}", name)


@dataclass
class Schedule:
    kind: str = "warmup_cosine"
    warmup_steps: int = 0
    total_steps: int = 1
    peak_lr: float = 0.001

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}", "schedule")
        if self.warmup_steps < 0 or self.total_steps < self.warmup_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps", "warmup_steps")


def lr_at(s: Schedule, step: int) -> float:
    """Linear warmup to ``peak_lr``, then cosine / linear decay to zero (or flat)."""
    if step < 0 or step > s.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.kind == "constant":
        return s.peak_lr
    decay_steps = s.total_steps - s.warmup_steps
    if decay_steps == 0:
        return s.peak_lr
    frac = (step - s.warmup_steps) / decay_steps
    if s.kind == "warmup_cosine":
        return s.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return s.peak_lr * (1.0 - frac)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_grad_norm(grads: dict) -> float:
    """Euclidean norm over every entry of every gradient, in sorted-name order."""
    total = 0.0
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        total += ordered_sum(g * g)
    return math.sqrt(total)


def adam_step(state: AdamState, params: dict, groups, grads: dict, lr_t: float, cfg: OptimConfig):
    """One in-place update of ``params``; returns ``state``.

    Per group, ``lr_t`` is scaled by the group's lr multiplier and decay by
    its weight-decay multiplier; frozen groups (and parameters without a
    gradient) are skipped entirely, moments included.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    scale = 1.0
    if cfg.grad_clip_norm is not None:
        norm = global_grad_norm(grads)
        if norm > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / norm
    for group in groups:
        if group.frozen:
            continue
        lr = lr_t * group.lr_multiplier
        wd = cfg.weight_decay * group.weight_decay_multiplier
        for name in group.params:
            if name not in grads:
                continue
            theta = params[name]
            g = np.asarray(grads[name], dtype=np.float64) * scale
            if g.shape != theta.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(theta)
                state.v[name] = np.zeros_like(theta)
            v = state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + wd * theta
            theta -= lr * update
    return state


@dataclass
class GradMonitor:
    window: int = 50
    spike_factor: float = 5.0
    history: deque = field(default_factory=deque)
    spikes: int = 0

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.window)


def monitor_update(mon: GradMonitor, norm: float) -> str:
    """``"spike"`` when ``norm`` exceeds spike_factor x the rolling median, else ``"ok"``."""
    verdict = "ok"
    if mon.history and norm > mon.spike_factor * float(np.median(list(mon.history))):
        verdict = "spike"
        mon.spikes += 1
    mon.history.append(float(norm))
    return verdict


def spike_recovery_steps(beta2: float, warm_steps=2000, spike=100.0, horizon=5000, beta1=0.9, eps=1e-8):
    """Steps after a single gradient spike whose update stays below half of steady state.

    A scalar sees gradient 1 for ``warm_steps`` steps, one step of ``spike``,
    then gradient 1 again. The steady-state update magnitude is taken from
    the step just before the spike.
    """
    m = v = 0.0
    steady = None
    suppressed = 0
    for t in range(1, warm_steps + horizon + 2):
        g = spike if t == warm_steps + 1 else 1.0
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        upd = (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
        if t == warm_steps:
            steady = abs(upd)
        elif t > warm_steps + 1 and abs(upd) < 0.5 * steady:
            suppressed += 1
    return suppressed
