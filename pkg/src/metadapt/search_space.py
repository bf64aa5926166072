"""The task-adaptable DAG block and its operation set.

Node ``x_i`` is the sum over ``j < i`` of the mixed operation on edge
``(j, i)``; a mixed operation is the softmax(alpha)-weighted sum of every
candidate operation applied to the same input. All candidates preserve the
(B, D, M, M) shape so the per-node sums are well formed.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from metadapt.autodiff import DTYPE, Tensor, concat, conv2d, einsum, leaky_relu, pool2d, softmax
from metadapt.autodiff import functional as F
from metadapt.autodiff.functional import LEAKY_SLOPE, GatherFlat, RunningMoments, ScatterFlat
from metadapt.autodiff.tensor import LeakyReLU, ScatterAdd
from metadapt.errors import DimensionError, PreconditionError
from metadapt.nn import BatchNorm2d, Conv2d, Module, ModuleList


class OpKind(enum.IntEnum):
    ZERO = 0
    SKIP = 1
    MEAN3 = 2
    MAX3 = 3
    CONV1 = 4
    CONV5_PLUS = 5
    CONV5 = 6
    CONV3_PLUS = 7
    CONV3 = 8

    @property
    def label(self) -> str:
        return OP_NAMES[self]

    @classmethod
    def from_label(cls, name: str) -> "OpKind":
        try:
            return _BY_NAME[name]
        except KeyError:
            raise ValueError(f"unknown operation {name!r}") from None


OP_NAMES = {
    OpKind.ZERO: "zero",
    OpKind.SKIP: "skip",
    OpKind.MEAN3: "mean3",
    OpKind.MAX3: "max3",
    OpKind.CONV1: "conv1",
    OpKind.CONV5_PLUS: "conv5+",
    OpKind.CONV5: "conv5",
    OpKind.CONV3_PLUS: "conv3+",
    OpKind.CONV3: "conv3",
}
_BY_NAME = {v: k for k, v in OP_NAMES.items()}

# colours used by the architecture plots, one per operation
OP_COLORS = {
    OpKind.ZERO: "#e62b4f",
    OpKind.SKIP: "#f29bba",
    OpKind.MEAN3: "#b5338a",
    OpKind.MAX3: "#9966cc",
    OpKind.CONV1: "#4c1a80",
    OpKind.CONV5_PLUS: "#0087bd",
    OpKind.CONV5: "#00b8eb",
    OpKind.CONV3_PLUS: "#abe0b0",
    OpKind.CONV3: "#2e857d",
}

FULL_OPS: tuple[OpKind, ...] = tuple(OpKind)
REDUCED_OPS: tuple[OpKind, ...] = tuple(o for o in OpKind if o not in (OpKind.CONV5_PLUS, OpKind.CONV5))


def op_set(mode: str) -> tuple[OpKind, ...]:
    if mode == "full":
        return FULL_OPS
    if mode == "reduced":
        return REDUCED_OPS
    raise ValueError(f"ops mode must be 'full' or 'reduced', got {mode!r}")


# ----------------------------------------------------------------------
# candidate operations
# ----------------------------------------------------------------------


class Zero(Module):
    def forward(self, x):
        return x * 0.0


class Skip(Module):
    def forward(self, x):
        return x


class PoolBN(Module):
    def __init__(self, mode: str, channels: int):
        super().__init__()
        self.mode = mode
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return self.bn(pool2d(x, self.mode, 3, 1, 1))


class ConvBN(Module):
    def __init__(self, k: int, channels: int, activation: bool, rng: np.random.Generator):
        super().__init__()
        self.activation = activation
        self.conv = Conv2d(channels, channels, k, rng)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        y = self.bn(self.conv(x))
        return leaky_relu(y) if self.activation else y


def make_op(kind: OpKind, channels: int, rng: np.random.Generator) -> Module:
    if kind is OpKind.ZERO:
        return Zero()
    if kind is OpKind.SKIP:
        return Skip()
    if kind is OpKind.MEAN3:
        return PoolBN("avg", channels)
    if kind is OpKind.MAX3:
        return PoolBN("max", channels)
    k = {OpKind.CONV1: 1, OpKind.CONV5_PLUS: 5, OpKind.CONV5: 5, OpKind.CONV3_PLUS: 3, OpKind.CONV3: 3}[kind]
    return ConvBN(k, channels, kind in (OpKind.CONV5_PLUS, OpKind.CONV3_PLUS), rng)


# ----------------------------------------------------------------------
# architecture coefficients
# ----------------------------------------------------------------------

Edge = tuple[int, int]


def dag_edges(nodes: int) -> list[Edge]:
    return [(i, j) for j in range(1, nodes) for i in range(j)]


@dataclass
class AlphaTable:
    """Per-edge architecture coefficients.

    ``onehot=False`` stores unconstrained logits that are normalised by a
    softmax inside the mixed operation. ``onehot=True`` stores operation
    weights directly (a discretised architecture).
    """

    nodes: int
    ops: tuple[OpKind, ...]
    logits: dict[Edge, Tensor]
    onehot: bool = False

    @classmethod
    def uniform(cls, nodes: int, ops: Sequence[OpKind], requires_grad: bool = True) -> "AlphaTable":
        ops = tuple(ops)
        return cls(nodes, ops, {e: Tensor(np.zeros(len(ops)), requires_grad=requires_grad) for e in dag_edges(nodes)})

    @classmethod
    def from_array(cls, nodes: int, ops: Sequence[OpKind], values: np.ndarray, requires_grad: bool = False, onehot: bool = False) -> "AlphaTable":
        edges = dag_edges(nodes)
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != (len(edges), len(ops)):
            raise DimensionError(f"expected alpha array {(len(edges), len(ops))}, got {values.shape}")
        return cls(nodes, tuple(ops), {e: Tensor(values[k].copy(), requires_grad=requires_grad) for k, e in enumerate(edges)}, onehot)

    @property
    def edges(self) -> list[Edge]:
        return dag_edges(self.nodes)

    def tensors(self) -> list[Tensor]:
        return [self.logits[e] for e in self.edges]

    def as_array(self) -> np.ndarray:
        return np.stack([self.logits[e].data for e in self.edges])

    def weights(self, edge: Edge) -> Tensor:
        t = self.logits[edge]
        return t if self.onehot else softmax(t)

    def weights_array(self) -> np.ndarray:
        arr = self.as_array().astype(np.float64)
        if self.onehot:
            return arr
        arr = np.exp(arr - arr.max(axis=1, keepdims=True))
        return arr / arr.sum(axis=1, keepdims=True)

    def copy(self, requires_grad: bool | None = None) -> "AlphaTable":
        rg = {e: t.requires_grad for e, t in self.logits.items()} if requires_grad is None else None
        return AlphaTable(
            self.nodes, self.ops,
            {e: Tensor(t.data.copy(), requires_grad=rg[e] if rg else requires_grad) for e, t in self.logits.items()},
            self.onehot,
        )

    def set_array(self, values: np.ndarray) -> None:
        for k, e in enumerate(self.edges):
            self.logits[e].data = np.asarray(values[k], dtype=DTYPE).copy()

    # -- CSV -----------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge_i", "edge_j", "op_name", "logit", "softmax_weight"])
        weights = self.weights_array()
        for k, (i, j) in enumerate(self.edges):
            for o, op in enumerate(self.ops):
                w.writerow([i, j, op.label, repr(float(self.logits[(i, j)].data[o])), f"{weights[k, o]:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, nodes: int | None = None, ops: Sequence[OpKind] | None = None) -> "AlphaTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty alpha CSV")
        op_order: list[OpKind] = []
        values: dict[Edge, dict[OpKind, float]] = {}
        for r in rows:
            op = OpKind.from_label(r["op_name"])
            if op not in op_order:
                op_order.append(op)
            values.setdefault((int(r["edge_i"]), int(r["edge_j"])), {})[op] = float(r["logit"])
        found_nodes = max(j for _, j in values) + 1
        if nodes is not None and nodes != found_nodes:
            raise PreconditionError(f"alpha CSV has {found_nodes} nodes, block has {nodes}")
        if set(values) != set(dag_edges(found_nodes)):
            raise PreconditionError("alpha CSV does not cover a complete DAG")
        if ops is not None and tuple(ops) != tuple(op_order):
            raise PreconditionError("alpha CSV operation set does not match the block")
        arr = np.array([[values[e][o] for o in op_order] for e in dag_edges(found_nodes)])
        return cls.from_array(found_nodes, op_order, arr)


def discretize(alpha: AlphaTable) -> AlphaTable:
    """One-hot table selecting the highest-weight operation per edge (lowest index on ties)."""
    w = alpha.weights_array()
    hard = np.zeros_like(w)
    hard[np.arange(len(w)), w.argmax(axis=1)] = 1.0
    return AlphaTable.from_array(alpha.nodes, alpha.ops, hard, onehot=True)


def top_k_ops(alpha: AlphaTable, k: int) -> dict[Edge, list[OpKind]]:
    if k > len(alpha.ops):
        raise PreconditionError(f"k={k} exceeds the {len(alpha.ops)} operations per edge")
    w = alpha.weights_array()
    out = {}
    for idx, e in enumerate(alpha.edges):
        order = np.argsort(-w[idx], kind="stable")[:k]
        out[e] = [alpha.ops[o] for o in order]
    return out


# ----------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------


def weighted_sum(x: Tensor, edge_ops: Sequence[Module], weights: Tensor, prune_zero_weights: bool = False) -> Tensor:
    """sum_o weights[o] * op_o(x), skipping ops whose output is identically zero."""
    if len(edge_ops) != weights.shape[0]:
        raise DimensionError(f"{len(edge_ops)} operations but {weights.shape[0]} weights")
    idx, ys = [], []
    for o, op in enumerate(edge_ops):
        if isinstance(op, Zero):
            continue
        if prune_zero_weights and weights.data[o] == 0.0 and not weights.requires_grad:
            continue
        y = op(x)
        if y.shape != x.shape:
            raise DimensionError(f"{type(op).__name__} changed shape {x.shape} -> {y.shape}")
        idx.append(o)
        ys.append(y)
    if not ys:
        return x * 0.0
    w = weights if len(idx) == len(edge_ops) else weights[np.array(idx)]
    return F.weighted_sum(w, ys)


def mixed_op_forward(x: Tensor, edge_ops: Sequence[Module], alpha_edge: Tensor) -> Tensor:
    return weighted_sum(x, edge_ops, softmax(alpha_edge))


class AdaptiveBlock(Module):
    """Complete DAG over ``nodes`` feature maps with one op instance per kind per edge."""

    def __init__(self, channels: int, nodes: int = 4, ops: Sequence[OpKind] = FULL_OPS, rng: np.random.Generator | None = None):
        super().__init__()
        if nodes < 2:
            raise PreconditionError("a block needs at least two nodes")
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.nodes = nodes
        self.ops = tuple(ops)
        self.edge_ops = Module()
        for i, j in dag_edges(nodes):
            setattr(self.edge_ops, f"e{i}_{j}", ModuleList(make_op(k, channels, rng) for k in self.ops))
        self.alpha_hat = AlphaTable.uniform(nodes, self.ops)

    def ops_for(self, edge: Edge) -> ModuleList:
        return getattr(self.edge_ops, f"e{edge[0]}_{edge[1]}")

    def forward(self, x0: Tensor, alpha: AlphaTable | None = None, return_nodes: bool = False):
        return block_forward(x0, self, self.alpha_hat if alpha is None else alpha, return_nodes)


def block_forward(
    x0: Tensor,
    block: AdaptiveBlock,
    alpha: AlphaTable,
    return_nodes: bool = False,
    edge_weights=None,
    fused: bool = True,
):
    """Evaluate the DAG; ``edge_weights`` overrides alpha with explicit per-edge weights.

    ``fused=False`` runs every candidate operation separately. The fused path
    computes the same quantities but batches, per source node, all outgoing
    convolutions into one convolution and all batch norms into one.
    """
    if x0.ndim != 4 or x0.shape[1] != block.channels:
        raise DimensionError(f"block expects (B, {block.channels}, M, M), got {x0.shape}")
    if alpha.nodes != block.nodes or alpha.ops != block.ops:
        raise DimensionError("alpha table does not match the block structure")

    def w_of(e):
        return alpha.weights(e) if edge_weights is None else edge_weights[e]

    nodes = [x0]
    if not fused:
        for j in range(1, block.nodes):
            acc = None
            for i in range(j):
                y = weighted_sum(nodes[i], block.ops_for((i, j)), w_of((i, j)), prune_zero_weights=alpha.onehot)
                acc = y if acc is None else acc + y
            nodes.append(acc)
        return nodes if return_nodes else nodes[-1]

    incoming: dict[int, list[Tensor]] = {j: [] for j in range(1, block.nodes)}
    for i in range(block.nodes - 1):
        if i > 0:
            nodes.append(_sum(incoming[i]))
        targets = list(range(i + 1, block.nodes))
        contrib = _fused_node(block, nodes[i], [(i, j) for j in targets], [w_of((i, j)) for j in targets])
        for e, j in enumerate(targets):
            incoming[j].append(contrib[e])
    nodes.append(_sum(incoming[block.nodes - 1]))
    return nodes if return_nodes else nodes[-1]


def _sum(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc


_CONV_KINDS = (OpKind.CONV1, OpKind.CONV5_PLUS, OpKind.CONV5, OpKind.CONV3_PLUS, OpKind.CONV3)


def _fused_node(block: AdaptiveBlock, x: Tensor, edges: list[Edge], weights: list[Tensor]) -> Tensor:
    """Weighted op outputs of one source node for each outgoing edge, stacked as (E, B, D, M, M)."""
    ops = block.ops
    n_ops = len(ops)
    conv_pos = [o for o, k in enumerate(ops) if k in _CONV_KINDS]
    pool_pos = [o for o, k in enumerate(ops) if k in (OpKind.MEAN3, OpKind.MAX3)]
    d = block.channels

    # channel blocks in the order they appear in the batch-norm input
    slots: list[tuple[int, int, Module]] = []
    parts: list[Tensor] = []
    if conv_pos:
        kmax = max(block.ops_for(edges[0])[o].conv.weight.shape[2] for o in conv_pos)
        kernels = []
        for e, edge in enumerate(edges):
            mods = block.ops_for(edge)
            for o in conv_pos:
                w = mods[o].conv.weight
                k = w.shape[2]
                if k != kmax:
                    off = (kmax - k) // 2
                    w = ScatterAdd.apply(
                        w, index=(slice(None), slice(None), slice(off, off + k), slice(off, off + k)),
                        shape=(d, d, kmax, kmax),
                    )
                kernels.append(w)
                slots.append((e, o, mods[o]))
        parts.append(conv2d(x, concat(kernels, axis=0) if len(kernels) > 1 else kernels[0], 1, kmax // 2))
    pooled: dict[str, Tensor] = {}
    for e, edge in enumerate(edges):
        mods = block.ops_for(edge)
        for o in pool_pos:
            mode = mods[o].mode
            if mode not in pooled:
                pooled[mode] = pool2d(x, mode, 3, 1, 1)
            parts.append(pooled[mode])
            slots.append((e, o, mods[o]))

    wcat = concat(weights, axis=0) if len(weights) > 1 else weights[0]
    out = None
    if slots:
        z = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        z = _fused_batch_norm(z, [m.bn for _, _, m in slots])
        slopes = [LEAKY_SLOPE if getattr(m, "activation", False) else 1.0 for _, _, m in slots]
        if any(sl != 1.0 for sl in slopes):
            z = LeakyReLU.apply(z, slope=np.repeat(np.array(slopes, dtype=DTYPE), d).reshape(1, -1, 1, 1))
        b, _, h, w = z.shape
        z = z.reshape(b, len(slots), d, h, w)
        src = np.array([e * n_ops + o for e, o, _ in slots])
        dst = np.arange(len(slots)) + np.array([e for e, _, _ in slots]) * len(slots)
        mix = ScatterFlat.apply(GatherFlat.apply(wcat, index=src), index=dst, shape=(len(edges), len(slots)))
        out = einsum("bkchw,ek->ebchw", z, mix)
    if OpKind.SKIP in ops:
        skip = GatherFlat.apply(wcat, index=np.arange(len(edges)) * n_ops + ops.index(OpKind.SKIP))
        y = einsum("bchw,e->ebchw", x, skip)
        out = y if out is None else out + y
    if out is None:
        out = Tensor(np.zeros((len(edges),) + x.shape, dtype=DTYPE))
    return out


def _fused_batch_norm(z: Tensor, bns: list[BatchNorm2d]) -> Tensor:
    """Batch norm over channel blocks that belong to separate BatchNorm2d layers."""
    first = bns[0]
    gamma = concat([bn.gamma for bn in bns], axis=0)
    beta = concat([bn.beta for bn in bns], axis=0)
    if not first.training:
        moments = RunningMoments(
            np.concatenate([bn.moments.mean for bn in bns]), np.concatenate([bn.moments.var for bn in bns])
        )
        return F.batch_norm(z, gamma, beta, moments, mode="eval", eps=first.eps)
    moments = RunningMoments(
        np.concatenate([bn.moments.mean for bn in bns]),
        np.concatenate([bn.moments.var for bn in bns]),
        first.moments.momentum,
    )
    track = first.track_stats
    out = F.batch_norm(z, gamma, beta, moments, mode="train", eps=first.eps, update_stats=track)
    if track:
        c = bns[0].gamma.shape[0]
        for k, bn in enumerate(bns):
            bn.moments.mean = moments.mean[k * c : (k + 1) * c].copy()
            bn.moments.var = moments.var[k * c : (k + 1) * c].copy()
    return out


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------


def export_dot(block: AdaptiveBlock, alpha: AlphaTable, k: int = 2, name: str = "adaptive_block") -> str:
    tops = top_k_ops(alpha, k)
    weights = alpha.weights_array()
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for n in range(alpha.nodes):
        lines.append(f'  x{n} [label="x_{n}"];')
    for idx, (i, j) in enumerate(alpha.edges):
        for op in tops[(i, j)]:
            wgt = weights[idx, alpha.ops.index(op)]
            lines.append(f'  x{i} -> x{j} [label="{op.label} {wgt:.3f}", color="{OP_COLORS[op]}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
