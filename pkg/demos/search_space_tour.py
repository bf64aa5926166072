"""Walk through the adaptive block: candidate ops, a mixed edge, and a hand-wired residual block.

Run: python3 demos/search_space_tour.py
"""
import numpy as np

from metadapt.autodiff import Tensor, no_grad
from metadapt.search_space import FULL_OPS, AdaptiveBlock, AlphaTable, OpKind, block_forward, dag_edges, export_dot, top_k_ops

rng = np.random.default_rng(0)
block = AdaptiveBlock(channels=4, nodes=4, rng=rng)
print("candidate ops:", ", ".join(op.label for op in FULL_OPS))
print("edges:", dag_edges(4))

# With uniform coefficients every edge averages all nine ops.
x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
with no_grad():
    y = block_forward(x, block, AlphaTable.uniform(4, block.ops, requires_grad=False))
print("uniform block output:", y.shape, f"mean {y.data.mean():+.4f}")

# One-hot coefficients turn the block into x + conv(conv(x)).
pick = {(0, 1): OpKind.CONV3_PLUS, (1, 2): OpKind.CONV3, (0, 3): OpKind.SKIP, (2, 3): OpKind.SKIP}
hard = np.zeros((6, len(block.ops)))
for k, e in enumerate(dag_edges(4)):
    hard[k, block.ops.index(pick.get(e, OpKind.ZERO))] = 1.0
table = AlphaTable.from_array(4, block.ops, hard, onehot=True)
with no_grad():
    nodes = block_forward(x, block, table, return_nodes=True)
print("residual wiring: node 3 - node 0 equals node 2:", np.allclose(nodes[3].data - x.data, nodes[2].data, atol=1e-6))

# A random table, its top-2 ops per edge and the DOT view.
random_table = AlphaTable.from_array(4, block.ops, rng.standard_normal((6, 9)))
for edge, ops in top_k_ops(random_table, 2).items():
    print(f"  {edge}: {[o.label for o in ops]}")
print(export_dot(block, random_table, k=1))
