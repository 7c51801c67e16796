"""Nesterov-accelerated Adam and reduce-on-plateau learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import NumericError, ParamTape


@dataclass(frozen=True)
class TrainSchedule:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    plateau_patience: int = 2
    decay_factor: float = math.sqrt(0.1)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_epochs < 0 or self.plateau_patience < 1:
            raise ValueError("max_epochs must be >= 0 and plateau_patience >= 1")

    def with_(self, **kw) -> "TrainSchedule":
        return replace(self, **kw)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def nadam_step(
    params: ParamTape,
    state: OptimizerState,
    schedule: TrainSchedule,
    lr: float | None = None,
) -> OptimizerState:
    """Apply one Nadam update in place to every tape entry.

    Uses bias-corrected moments with the Nesterov look-ahead applied to the
    first moment (Dozat's formulation without the momentum schedule)::

        m_hat = b1 * m_t / (1 - b1^(t+1)) + (1 - b1) * g_t / (1 - b1^t)
        v_hat = v_t / (1 - b2^t)
        theta -= lr * m_hat / (sqrt(v_hat) + eps)

    ``lr`` overrides ``schedule.learning_rate`` (the plateau policy changes it
    during training).
    """
    lr = schedule.learning_rate if lr is None else lr
    b1, b2, eps = schedule.beta1, schedule.beta2, schedule.epsilon
    for e in params:
        if not np.all(np.isfinite(e.grad)):
            raise NumericError(f"NaN/Inf gradient in parameter {e.name!r}")
    t = state.step + 1
    c1 = 1.0 - b1**t
    c1_next = 1.0 - b1 ** (t + 1)
    c2 = 1.0 - b2**t
    for e in params:
        g = e.grad
        m = state.m.get(e.name)
        if m is None:
            m = state.m[e.name] = np.zeros_like(e.value)
            state.v[e.name] = np.zeros_like(e.value)
        v = state.v[e.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        m_hat = b1 * m / c1_next + (1.0 - b1) * g / c1
        v_hat = v / c2
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return state


class PlateauDecay:
    """Multiply the learning rate by ``decay_factor`` after ``patience``
    consecutive epochs without a strict improvement over the best loss."""

    def __init__(self, lr: float, patience: int, decay_factor: float):
        self.lr = lr
        self.patience = patience
        self.decay_factor = decay_factor
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.decay_factor
                self.wait = 0
        return self.lr


def plateau_decay(history, schedule: TrainSchedule) -> float:
    """Learning rate in effect after replaying ``history`` through the policy."""
    if len(history) == 0:
        raise ValueError("plateau_decay: empty history")
    policy = PlateauDecay(schedule.learning_rate, schedule.plateau_patience, schedule.decay_factor)
    for loss in history:
        policy.update(float(loss))
    return policy.lr
