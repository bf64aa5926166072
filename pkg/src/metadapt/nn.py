"""Minimal layer containers on top of the autodiff tensors."""
from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Iterator

import numpy as np

from metadapt.autodiff import DTYPE, RunningMoments, Tensor, batch_norm, conv2d, linear


class Module:
    """Holds parameters (Tensors), running moments and child modules.

    Attribute assignment registers values by type, so subclasses simply write
    ``self.weight = Tensor(..., requires_grad=True)``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "track_stats", True)

    def __setattr__(self, name, value):
        for store in ("_params", "_buffers", "_modules"):
            self.__dict__[store].pop(name, None)
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, RunningMoments):
            self._buffers[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        d = self.__dict__
        for store in ("_params", "_buffers", "_modules"):
            if name in d.get(store, ()):
                return d[store][name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal -----------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_prefix, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield mod_prefix + name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningMoments]]:
        for mod_prefix, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield mod_prefix + name, b

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name + ".mean"] = b.mean.copy()
            state[name + ".var"] = b.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{n}.{s}" for n in buffers for s in ("mean", "var")}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, b in buffers.items():
            b.mean = np.asarray(state[name + ".mean"], dtype=DTYPE).copy()
            b.var = np.asarray(state[name + ".var"], dtype=DTYPE).copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._modules))] = m

    def __getitem__(self, i: int) -> Module:
        return self._modules[str(i)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


@contextlib.contextmanager
def substitute(module: Module, values: dict[str, Tensor]):
    """Temporarily replace named parameters of ``module`` with other Tensors."""
    owners = {}
    for mod_prefix, mod in module.named_modules():
        for name in mod._params:
            owners[mod_prefix + name] = (mod, name)
    saved = {}
    try:
        for full, t in values.items():
            mod, name = owners[full]
            saved[full] = mod._params[name]
            mod._params[name] = t
        yield
    finally:
        for full, t in saved.items():
            mod, name = owners[full]
            mod._params[name] = t


@contextlib.contextmanager
def frozen_stats(module: Module):
    """Batch-norm layers keep their running moments untouched inside the block."""
    mods = [m for _, m in module.named_modules()]
    prev = [m.track_stats for m in mods]
    for m in mods:
        object.__setattr__(m, "track_stats", False)
    try:
        yield
    finally:
        for m, p in zip(mods, prev):
            object.__setattr__(m, "track_stats", p)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = kaiming_uniform((cout, cin, k, k), cin * k * k, rng)

    def forward(self, x):
        return conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.moments = RunningMoments.fresh(channels, momentum)

    def forward(self, x):
        mode = "train" if self.training else "eval"
        return batch_norm(
            x, self.gamma, self.beta, self.moments, mode=mode, eps=self.eps,
            update_stats=self.training and self.track_stats,
        )


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, init_scale: float | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(din) if init_scale is None else init_scale
        self.weight = Tensor(rng.uniform(-bound, bound, size=(din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x):
        return linear(x, self.weight, self.bias)
