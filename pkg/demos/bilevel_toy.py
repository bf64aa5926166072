"""First- vs second-order architecture gradients on a problem small enough to solve by hand.

Inner loss (w - a)^2 pulls w toward a, outer loss (w - 1)^2 wants w at 1.
Holding w fixed, the first-order gradient w.r.t. a is zero; the second-order
one looks through a virtual step of w and sees -2 at w = a = 0, mu = 0.5.
Then the same comparison on a small network block.

Run: python3 demos/bilevel_toy.py
"""
import numpy as np

from metadapt.autodiff import Tensor
from metadapt.bilevel import alpha_grad_first_order, alpha_grad_second_order

def leaf(v):
    return [Tensor(np.array([v]), requires_grad=True)]

lw = lambda w, a: ((w[0] - a[0]) ** 2.0).sum()  # noqa: E731
la = lambda w, a: ((w[0] - 1.0) ** 2.0).sum()  # noqa: E731

g1, _ = alpha_grad_first_order(leaf(0.0), leaf(0.0), la)
print(f"first order  : {g1[0][0]:+.4f}")
for mode in ("exact", "finite-diff"):
    g2, _ = alpha_grad_second_order(leaf(0.0), leaf(0.0), lw, la, mu=0.5, mode=mode)
    print(f"second order ({mode}): {g2[0][0]:+.4f}")

# Outer iterations: only the second-order rule moves a.
for name, order in (("first", 1), ("second", 2)):
    w, a = 0.0, 0.0
    for _ in range(50):
        w -= 0.5 * 2 * (w - a)
        if order == 1:
            grad_a = 0.0
        else:
            g, _ = alpha_grad_second_order(leaf(w), leaf(a), lw, la, mu=0.5, mode="exact")
            grad_a = float(g[0][0])
        a -= 0.1 * grad_a
    print(f"{name:6s} order after 50 steps: w={w:.3f} a={a:.3f} outer loss={(w - 1) ** 2:.4f}")

# The same check on a two-node block with a ridge head.
import sys, pathlib  # noqa: E401,E402
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "tests"))
from toys import tiny_bilevel_problem  # noqa: E402

w, a, lw_, la_ = tiny_bilevel_problem(0)
flat = lambda gs: np.concatenate([g.ravel() for g in gs])  # noqa: E731
first = flat(alpha_grad_first_order(w, a, la_)[0])
for mu in (0.05, 0.5):
    ge = flat(alpha_grad_second_order(w, a, lw_, la_, mu=mu, mode="exact")[0])
    gf = flat(alpha_grad_second_order(w, a, lw_, la_, mu=mu, mode="finite-diff")[0])
    print(
        f"mu={mu}: correction is {np.abs(ge - first).max() / np.abs(ge).max():.1%} of the gradient, "
        f"finite-diff vs exact {np.abs(ge - gf).max() / np.abs(ge).max():.1e}"
    )
