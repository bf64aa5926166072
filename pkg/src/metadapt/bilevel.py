"""Alternating optimisation of weights w and architecture logits alpha.

Losses are passed as closures ``loss(w, alpha) -> scalar Tensor`` over lists
of Tensors, so the same code drives the full model (via parameter
substitution) and small analytic toys. Each step either hands the gradient
to an optimizer or, when none is given, takes a plain gradient step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from metadapt.autodiff import DTYPE, Tensor, grad
from metadapt.errors import NumericError, PreconditionError
from metadapt.optim import Optimizer

log = logging.getLogger(__name__)

LossFn = Callable[[Sequence[Tensor], Sequence[Tensor]], Tensor]

FD_RADIUS = 0.01


def _finite(gs: Sequence[Tensor], what: str) -> list[np.ndarray]:
    out = [g.data for g in gs]
    if not all(np.isfinite(g).all() for g in out):
        raise NumericError(f"non-finite {what} gradient; step aborted")
    return out


def _apply(params: Sequence[Tensor], grads: list[np.ndarray], opt: Optimizer | None, lr: float | None) -> None:
    if opt is not None:
        opt.step(grads)
        return
    if lr is None:
        raise PreconditionError("a learning rate is required without an optimizer")
    for p, g in zip(params, grads):
        p.data = (p.data - DTYPE(lr) * g).astype(DTYPE)


def step_w(w: Sequence[Tensor], alpha: Sequence[Tensor], loss_w: LossFn, opt: Optimizer | None = None, mu: float | None = None) -> float:
    """One SGD step on L_w; alpha is read but never changed."""
    loss = loss_w(w, alpha)
    grads = _finite(grad(loss, w), "weight")
    _apply(w, grads, opt, mu)
    return float(loss.item())


def alpha_grad_first_order(w, alpha, loss_alpha: LossFn) -> tuple[list[np.ndarray], float]:
    loss = loss_alpha(w, alpha)
    return _finite(grad(loss, alpha), "alpha"), float(loss.item())


def step_alpha_first_order(w, alpha, loss_alpha: LossFn, opt: Optimizer | None = None, eta: float | None = None) -> float:
    grads, value = alpha_grad_first_order(w, alpha, loss_alpha)
    _apply(alpha, grads, opt, eta)
    return value


def alpha_grad_second_order(
    w: Sequence[Tensor],
    alpha: Sequence[Tensor],
    loss_w: LossFn,
    loss_alpha: LossFn,
    mu: float,
    mode: str = "finite-diff",
) -> tuple[list[np.ndarray], float]:
    """Gradient of L_alpha(w - mu * grad_w L_w(w, alpha), alpha) w.r.t. alpha.

    ``exact`` differentiates through the virtual step. ``finite-diff``
    replaces the mixed second derivative by a central difference of
    grad_alpha L_w around w along grad_{w'} L_alpha.
    """
    if mode not in ("exact", "finite-diff"):
        raise ValueError(f"mode must be 'exact' or 'finite-diff', got {mode!r}")
    w = list(w)
    alpha = list(alpha)
    if mode == "exact":
        gw = grad(loss_w(w, alpha), w, create_graph=True)
        w_virtual = [p - gp * mu for p, gp in zip(w, gw)]
        loss = loss_alpha(w_virtual, alpha)
        return _finite(grad(loss, alpha), "alpha"), float(loss.item())

    gw = _finite(grad(loss_w(w, alpha), w), "weight")
    w_virtual = [Tensor(p.data - DTYPE(mu) * g, requires_grad=True) for p, g in zip(w, gw)]
    loss = loss_alpha(w_virtual, alpha)
    parts = grad(loss, alpha + w_virtual)
    direct = _finite(parts[: len(alpha)], "alpha")
    v = _finite(parts[len(alpha) :], "weight")
    if mu == 0:
        return direct, float(loss.item())
    norm = float(np.sqrt(sum(float(np.sum(x.astype(np.float64) ** 2)) for x in v)))
    if norm == 0.0:
        log.warning("zero gradient norm at the virtual weights; second-order correction skipped")
        return direct, float(loss.item())
    eps = FD_RADIUS / norm
    w_plus = [Tensor(p.data + DTYPE(eps) * d) for p, d in zip(w, v)]
    w_minus = [Tensor(p.data - DTYPE(eps) * d) for p, d in zip(w, v)]
    g_plus = _finite(grad(loss_w(w_plus, alpha), alpha), "alpha")
    g_minus = _finite(grad(loss_w(w_minus, alpha), alpha), "alpha")
    hvp = [(gp - gm) / DTYPE(2 * eps) for gp, gm in zip(g_plus, g_minus)]
    return [(d - DTYPE(mu) * h).astype(DTYPE) for d, h in zip(direct, hvp)], float(loss.item())


def step_alpha_second_order(
    w,
    alpha,
    loss_w: LossFn,
    loss_alpha: LossFn,
    mu: float,
    opt: Optimizer | None = None,
    eta: float | None = None,
    mode: str = "finite-diff",
) -> float:
    grads, value = alpha_grad_second_order(w, alpha, loss_w, loss_alpha, mu, mode)
    _apply(alpha, grads, opt, eta)
    return value


# ----------------------------------------------------------------------
# one epoch of alternating updates
# ----------------------------------------------------------------------


@dataclass
class FoldRecord:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)

    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")

    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")


@dataclass
class EpochStats:
    train_w: FoldRecord = field(default_factory=FoldRecord)
    train_alpha: FoldRecord = field(default_factory=FoldRecord)
    w_steps: int = 0
    alpha_steps: int = 0


class BilevelProblem:
    """What ``search_epoch`` needs from a model.

    ``loss(batch, update_stats)`` returns a closure ``(w, alpha) -> loss``
    and records the batch accuracy in ``last_accuracy`` when it is evaluated.
    ``update_stats`` is only set for the real weight step, so virtual steps
    and finite-difference probes leave running statistics alone.
    """

    w_params: list[Tensor]
    alpha_params: list[Tensor]
    last_accuracy: float = float("nan")

    def loss(self, batch, update_stats: bool = False) -> LossFn:
        raise NotImplementedError

    def before_step(self) -> None:
        """Hook run before each optimisation step (e.g. fresh Gumbel noise)."""


def check_fold(batch_ids: Iterable[int], forbidden: set[int], what: str) -> None:
    leaked = forbidden.intersection(int(i) for i in batch_ids)
    if leaked:
        raise PreconditionError(f"{what} batch contains {len(leaked)} samples of the other fold")


def search_epoch(
    problem: BilevelProblem,
    w_batches: Iterable,
    alpha_batches: Iterable,
    w_opt: Optimizer,
    alpha_opt: Optimizer | None,
    order: str = "second",
    mode: str = "finite-diff",
    fold_ids: tuple[set[int], set[int]] | None = None,
    batch_ids: Callable[[object], Iterable[int]] | None = None,
    on_alpha_step: Callable[[int], None] | None = None,
) -> EpochStats:
    """Alternate one alpha step and one w step per mini-batch pair.

    ``alpha_opt=None`` freezes alpha (the uniform-coefficient baseline). With
    ``fold_ids=(ids_w, ids_alpha)`` every batch is checked against the other
    fold before it is used.
    """
    if order not in ("first", "second"):
        raise ValueError(f"order must be 'first' or 'second', got {order!r}")
    stats = EpochStats()
    for k, (bw, ba) in enumerate(zip(w_batches, alpha_batches)):
        if fold_ids is not None and batch_ids is not None:
            check_fold(batch_ids(bw), fold_ids[1], "train_w")
            check_fold(batch_ids(ba), fold_ids[0], "train_alpha")
        if alpha_opt is not None:
            if on_alpha_step is not None:
                on_alpha_step(k)
            problem.before_step()
            la = problem.loss(ba)
            if order == "first":
                value = step_alpha_first_order(problem.w_params, problem.alpha_params, la, alpha_opt)
            else:
                lw = problem.loss(bw)
                value = step_alpha_second_order(
                    problem.w_params, problem.alpha_params, lw, la, w_opt.lr, alpha_opt, mode=mode
                )
            stats.train_alpha.losses.append(value)
            stats.train_alpha.accuracies.append(problem.last_accuracy)
            stats.alpha_steps += 1
        problem.before_step()
        value = step_w(problem.w_params, problem.alpha_params, problem.loss(bw, update_stats=True), w_opt)
        stats.train_w.losses.append(value)
        stats.train_w.accuracies.append(problem.last_accuracy)
        stats.w_steps += 1
    return stats
