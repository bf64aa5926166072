"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from metadapt.autodiff.tensor import DTYPE, Tensor, grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: bool = False
    reason: str = ""

    def ok(self, tol: float = 1e-3) -> bool:
        return self.skipped or self.max_rel_error < tol


def numeric_grad(
    f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], wrt: Sequence[int], eps: float
) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. ``arrays[i]`` for i in ``wrt`` (perturbed in place)."""
    out = []
    for k in wrt:
        a = arrays[k]
        g = np.zeros(a.shape, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(arrays)
            flat[i] = orig - eps
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-2,
    wrt: Sequence[int] | None = None,
    skip_if: Callable[[list[np.ndarray]], str | None] | None = None,
    seed: int = 7919,
) -> GradCheckResult:
    """Compare autodiff gradients of ``op`` with central differences.

    The op output is reduced to a scalar by a fixed random projection. The
    error for each differentiated input is ``max|a - n| / max(max|a|, max|n|,
    1e-6)`` and the worst input is reported.
    """
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    if skip_if is not None:
        reason = skip_if(arrays)
        if reason:
            return GradCheckResult(float("nan"), skipped=True, reason=reason)

    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = op(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape).astype(DTYPE)
    loss = (out * Tensor(proj)).sum()
    analytic = grad(loss, [tensors[i] for i in wrt])

    def scalar(arrs):
        # grad stays enabled: ops may differentiate internally
        y = op(*[Tensor(a) for a in arrs])
        return float(np.sum(y.data.astype(np.float64) * proj))

    numeric = numeric_grad(scalar, arrays, wrt, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = a.data.astype(np.float64)
        denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-6)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0) / denom))
    return GradCheckResult(worst)


def maxpool_tie_reason(x: np.ndarray, eps: float, kernel: int = 3, stride: int = 1, padding: int = 1) -> str | None:
    """Report whether any pooling window has two values within 2*eps."""
    from numpy.lib.stride_tricks import sliding_window_view

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = np.sort(win.reshape(*win.shape[:4], -1), axis=-1)
    gap = win[..., -1] - win[..., -2]
    if np.any(gap < 2 * eps):
        return "max-pool window has near-tied maxima"
    return None


def kink_reason(x: np.ndarray, eps: float) -> str | None:
    if np.any(np.abs(x) < 2 * eps):
        return "input within eps of the kink at zero"
    return None
