"""How cold does a Gumbel-softmax sample have to be before it looks one-hot?

At temperature tau the largest weight exceeds 0.99 only if the top two
perturbed log-probabilities are at least tau*ln(99) apart (the other ops
stop mattering once tau is small). For uniform probabilities over n ops that
has probability n / (n + (n-1)(99^tau - 1)), so even tau = 0.01 leaves a few
percent of samples visibly mixed unless one op already dominates.

Run: python3 demos/gumbel_temperature.py
"""
import numpy as np

from metadapt.autodiff import Tensor
from metadapt.gumbel import gumbel_noise, gumbel_sample

rng = np.random.default_rng(0)
panel = {
    "uniform over 9": np.full(9, 1 / 9),
    "0.4/0.3/0.15/0.1/0.05": np.array([0.4, 0.3, 0.15, 0.1, 0.05]),
    "0.98/0.01/0.01": np.array([0.98, 0.01, 0.01]),
}
print(f"{'tau':>6} " + " ".join(f"{k:>24}" for k in panel) + f" {'closed form (uniform)':>24}")
for tau in (1.0, 0.3, 0.1, 0.03, 0.01, 0.003):
    rates = []
    for p in panel.values():
        z = gumbel_sample(Tensor(p), tau, noise=gumbel_noise((20_000, len(p)), rng)).data
        rates.append((z.max(axis=1) > 0.99).mean())
    closed = 9 / (9 + 8 * (99 ** tau - 1))
    print(f"{tau:>6} " + " ".join(f"{r:>24.3f}" for r in rates) + f" {closed:>24.3f}")

# Argmax frequencies follow the probabilities at any temperature.
p = panel["0.4/0.3/0.15/0.1/0.05"]
z = gumbel_sample(Tensor(p), 5.0, noise=gumbel_noise((20_000, 5), rng)).data
print("argmax frequencies at tau=5:", np.round(np.bincount(z.argmax(1), minlength=5) / len(z), 3), "vs", p)
