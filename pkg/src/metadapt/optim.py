"""SGD with momentum, Adam, and the two learning-rate schedules."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from metadapt.autodiff import DTYPE, Tensor
from metadapt.errors import NumericError, PreconditionError


def _check_grads(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise PreconditionError(f"{len(params)} parameters but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=DTYPE)
        if g.shape != p.shape:
            raise PreconditionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; step aborted")
        out.append(g)
    return out


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise PreconditionError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr

    def step(self, grads) -> None:
        grads = _check_grads(self.params, grads)
        self._apply(grads)

    def _apply(self, grads: list[np.ndarray]) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    """buf = m*buf + (g + wd*p); p -= lr*buf (the first step seeds buf with the gradient)."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def _apply(self, grads):
        lr = DTYPE(self.lr)
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.data
            if self.momentum:
                buf = self.buffers[k]
                buf = g.copy() if buf is None else DTYPE(self.momentum) * buf + g
                self.buffers[k] = buf
                g = buf
            p.data = (p.data - lr * g).astype(DTYPE)

    def state_dict(self):
        return {f"buf{k}": b for k, b in enumerate(self.buffers) if b is not None}

    def load_state_dict(self, state):
        self.buffers = [state.get(f"buf{k}") for k in range(len(self.params))]


class Adam(Optimizer):
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape, DTYPE) for p in self.params]
        self.v = [np.zeros(p.shape, DTYPE) for p in self.params]

    def _apply(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.data
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(DTYPE)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(DTYPE)
            denom = np.sqrt(self.v[k] / c2) + self.eps
            p.data = (p.data - self.lr * (self.m[k] / c1) / denom).astype(DTYPE)

    def state_dict(self):
        state = {"t": np.array([self.t], dtype=np.int64)}
        for k in range(len(self.params)):
            state[f"m{k}"] = self.m[k]
            state[f"v{k}"] = self.v[k]
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        self.m = [np.asarray(state[f"m{k}"], DTYPE) for k in range(len(self.params))]
        self.v = [np.asarray(state[f"v{k}"], DTYPE) for k in range(len(self.params))]


class CosineSchedule:
    """eta_t = eta_min + (eta0 - eta_min) * (1 + cos(pi t / T)) / 2.

    ``eta_min`` is clipped to eta0 so the schedule never increases.
    """

    def __init__(self, eta0: float, total_steps: int, eta_min: float = 3e-5):
        if eta0 <= 0 or total_steps < 1:
            raise PreconditionError("cosine schedule needs eta0 > 0 and at least one step")
        self.eta0 = eta0
        self.total = total_steps
        self.eta_min = min(eta_min, eta0)

    def __call__(self, step: int) -> float:
        t = min(max(step, 0), self.total)
        return self.eta_min + (self.eta0 - self.eta_min) * 0.5 * (1 + math.cos(math.pi * t / self.total))


class StepSchedule:
    """Piecewise-constant rate: ``base`` until the first milestone, then each listed value."""

    def __init__(self, base: float, milestones: Sequence[tuple[float, float]]):
        self.base = base
        self.milestones = sorted((float(e), float(v)) for e, v in milestones)

    def __call__(self, epoch: float) -> float:
        lr = self.base
        for at, value in self.milestones:
            if epoch >= at:
                lr = value
        return lr
