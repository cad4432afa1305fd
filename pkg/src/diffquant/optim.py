"""SGD with momentum, ADAM and step-decay learning-rate schedules.

The ``*_step`` functions are pure: they take parameter/gradient arrays plus an
explicit state object and return new arrays.  ``SGD`` and ``Adam`` wrap them
for in-place updates of ``Parameter`` objects during training.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _check_shapes(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")


@dataclass
class SGDState:
    lr: float = 0.01
    momentum: float = 0.9
    buffers: list[np.ndarray] | None = None


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      state: SGDState) -> list[np.ndarray]:
    """Classical momentum: v <- mu*v + g ; p <- p - lr*v."""
    _check_shapes(params, grads)
    if state.buffers is None:
        state.buffers = [np.zeros(np.shape(p)) for p in params]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.buffers[i] = state.momentum * state.buffers[i] + g
        out.append(p - state.lr * state.buffers[i])
    return out


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    _check_shapes(params, grads)
    if state.m is None:
        state.m = [np.zeros(np.shape(p)) for p in params]
        state.v = [np.zeros(np.shape(p)) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        object.__setattr__(self, "milestones", ms)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """base_lr * factor ** (number of milestones <= step)."""
    return schedule.base_lr * schedule.factor ** bisect.bisect_right(schedule.milestones, step)


class Parameter:
    """A trainable array with an accumulated gradient."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class _Optimizer:
    params: list[Parameter]
    state: object = field(default=None)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        new = self._update([p.value for p in self.params], [p.grad for p in self.params])
        for p, v in zip(self.params, new):
            p.value = v


class SGD(_Optimizer):
    def __init__(self, params, lr=0.01, momentum=0.9):
        super().__init__(list(params), SGDState(lr=lr, momentum=momentum))

    def _update(self, values, grads):
        return sgd_momentum_step(values, grads, self.state)


class Adam(_Optimizer):
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(list(params), AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps))

    def _update(self, values, grads):
        return adam_step(values, grads, self.state)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9) -> _Optimizer:
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
