"""Closed-form few-shot classifiers on pooled episode features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metadapt.autodiff import DTYPE, Tensor, cross_entropy, global_avg_pool, solve
from metadapt.errors import DimensionError, PreconditionError


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "ridge"
    ridge_lambda: float = 1.0
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in ("ridge", "prototype"):
            raise ValueError(f"head kind must be 'ridge' or 'prototype', got {self.kind!r}")
        if self.ridge_lambda <= 0 or (self.tau is not None and self.tau <= 0):
            raise PreconditionError("ridge_lambda and tau must be positive")

    @property
    def temperature(self) -> float:
        if self.tau is not None:
            return self.tau
        return 0.5 if self.kind == "prototype" else 1.0


def embed(features: Tensor) -> Tensor:
    return global_avg_pool(features)


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.size, n), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _num_classes(labels: np.ndarray, n_way: int | None) -> int:
    n = int(labels.max()) + 1 if n_way is None else n_way
    missing = sorted(set(range(n)) - set(labels.tolist()))
    if missing:
        raise PreconditionError(f"classes {missing} have no support samples")
    return n


def prototype_logits(support_emb: Tensor, support_labels, query_emb: Tensor, tau: float = 0.5, n_way: int | None = None) -> Tensor:
    """-tau * squared distance from each query to each class mean."""
    labels = np.asarray(support_labels, dtype=np.int64)
    n = _num_classes(labels, n_way)
    y = _onehot(labels, n)
    counts = y.sum(axis=0)
    protos = Tensor((y / counts).T) @ support_emb  # (N, D)
    q2 = (query_emb * query_emb).sum(axis=1, keepdims=True)
    p2 = (protos * protos).sum(axis=1).reshape(1, -1)
    d2 = q2 - 2.0 * (query_emb @ protos.T) + p2
    return d2 * (-tau)


def ridge_logits(
    support_emb: Tensor,
    support_labels,
    query_emb: Tensor,
    lam: float = 1.0,
    tau: float = 1.0,
    n_way: int | None = None,
) -> Tensor:
    """tau * query @ W with W the ridge solution on one-hot support targets.

    W = (X^T X + lam I)^-1 X^T Y is computed in whichever of the primal
    (D x D) or dual (S x S) form is smaller; both are the same matrix.
    """
    if lam <= 0:
        raise PreconditionError("ridge regulariser must be positive")
    labels = np.asarray(support_labels, dtype=np.int64)
    if support_emb.ndim != 2 or query_emb.ndim != 2 or support_emb.shape[1] != query_emb.shape[1]:
        raise DimensionError("ridge head expects (S, D) support and (B, D) query embeddings")
    if labels.shape != (support_emb.shape[0],):
        raise DimensionError("one label per support embedding required")
    n = _num_classes(labels, n_way)
    y = Tensor(_onehot(labels, n))
    s, d = support_emb.shape
    x = support_emb
    if s < d:
        gram = x @ x.T + Tensor(lam * np.eye(s, dtype=DTYPE))
        w = x.T @ solve(gram, y)
    else:
        gram = x.T @ x + Tensor(lam * np.eye(d, dtype=DTYPE))
        w = solve(gram, x.T @ y)
    return (query_emb @ w) * tau


def head_logits(cfg: HeadConfig, support_emb: Tensor, support_labels, query_emb: Tensor, n_way: int | None = None) -> Tensor:
    if cfg.kind == "ridge":
        return ridge_logits(support_emb, support_labels, query_emb, cfg.ridge_lambda, cfg.temperature, n_way)
    return prototype_logits(support_emb, support_labels, query_emb, cfg.temperature, n_way)


def episode_loss(logits: Tensor, labels) -> Tensor:
    return cross_entropy(logits, labels)


def accuracy(logits: Tensor, labels) -> float:
    return float(np.mean(logits.data.argmax(axis=1) == np.asarray(labels)))
