"""Per-edge controllers that predict a task-specific correction of alpha.

Each controller pools node ``x_i`` over space for every support sample,
passes each pooled vector through a small ReLU bottleneck, concatenates
the S bottleneck codes and maps them linearly to one logit offset per
operation. The output layer starts at zero, so a fresh bank leaves the
searched architecture untouched.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from metadapt.autodiff import Tensor, concat, global_avg_pool, linear, no_grad, relu
from metadapt.errors import DimensionError, PreconditionError
from metadapt.nn import Linear, Module
from metadapt.search_space import AdaptiveBlock, AlphaTable, Edge, block_forward, dag_edges


def default_bottleneck(channels: int) -> int:
    return max(8, channels // 8)


class Controller(Module):
    def __init__(self, channels: int, support_size: int, n_ops: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.support_size = support_size
        self.bottleneck = Linear(channels, bottleneck, rng)
        self.out = Linear(support_size * bottleneck, n_ops, rng)
        self.out.weight.data[...] = 0.0


class ControllerBank(Module):
    """One controller per DAG edge, bound to a fixed support size."""

    def __init__(
        self,
        block: AdaptiveBlock,
        support_size: int,
        bottleneck: int | None = None,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if support_size < 1:
            raise PreconditionError("support size must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = block.channels
        self.nodes = block.nodes
        self.n_ops = len(block.ops)
        self.support_size = support_size
        self.d_bottleneck = default_bottleneck(block.channels) if bottleneck is None else bottleneck
        for i, j in dag_edges(block.nodes):
            setattr(self, f"e{i}_{j}", Controller(block.channels, support_size, self.n_ops, self.d_bottleneck, rng))

    def controller(self, edge: Edge) -> Controller:
        return getattr(self, f"e{edge[0]}_{edge[1]}")


def canonical_order(labels) -> np.ndarray:
    """Permutation sorting support samples by label, keeping intra-class order."""
    return np.argsort(np.asarray(labels), kind="stable")


def controller_forward(support_features: Tensor, params: Controller) -> Tensor:
    if support_features.ndim != 4:
        raise DimensionError("controller input must be (S, D, M, M)")
    s = support_features.shape[0]
    if s != params.support_size:
        raise DimensionError(f"controller was built for {params.support_size} support samples, got {s}")
    pooled = global_avg_pool(support_features)
    codes = relu(linear(pooled, params.bottleneck.weight, params.bottleneck.bias))
    flat = codes.reshape(1, -1)
    return linear(flat, params.out.weight, params.out.bias).reshape(-1)


def adapt_alphas(alpha_hat: AlphaTable, deltas: dict[Edge, Tensor]) -> AlphaTable:
    if set(deltas) != set(alpha_hat.logits):
        raise DimensionError("delta edges do not match the alpha table")
    out = {}
    for e, base in alpha_hat.logits.items():
        d = deltas[e]
        if d.shape != base.shape:
            raise DimensionError(f"edge {e}: delta shape {d.shape} != {base.shape}")
        out[e] = base + d
    return AlphaTable(alpha_hat.nodes, alpha_hat.ops, out, alpha_hat.onehot)


def predict_deltas(bank: ControllerBank, support_nodes: list[Tensor]) -> dict[Edge, Tensor]:
    return {(i, j): controller_forward(support_nodes[i], bank.controller((i, j))) for i, j in dag_edges(bank.nodes)}


def adapted_block_forward(
    x_support: Tensor,
    x_query: Tensor,
    block: AdaptiveBlock,
    bank: ControllerBank,
    alpha_hat: AlphaTable | None = None,
    edge_weights: Callable[[AlphaTable], dict] | None = None,
) -> tuple[Tensor, AlphaTable]:
    """Two-pass evaluation with task-adapted coefficients.

    ``x_support`` must already be in canonical order. Pass 1 runs the support
    set under alpha_hat and feeds each node's activations to the controllers
    of its outgoing edges; pass 2 runs support and query together under the
    adapted table. Returns the final features (support rows first) and the
    adapted table. ``edge_weights`` maps a table to explicit per-edge weights
    (used by the stochastic variant).
    """
    alpha_hat = block.alpha_hat if alpha_hat is None else alpha_hat
    with no_grad():
        nodes = block_forward(x_support, block, alpha_hat, return_nodes=True)
    support_nodes = [Tensor(n.data) for n in nodes]
    adapted = adapt_alphas(alpha_hat, predict_deltas(bank, support_nodes))
    x = concat([x_support, x_query], axis=0)
    weights = None if edge_weights is None else edge_weights(adapted)
    return block_forward(x, block, adapted, edge_weights=weights), adapted
