"""Gumbel-softmax relaxation for the stochastic block variant.

During training every edge draws one relaxed one-hot vector ``z`` from the
normalised coefficients and mixes its operations with ``z``; at test time
the top-probability operation is taken outright.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metadapt.autodiff import DTYPE, Tensor, clamp_min, softmax
from metadapt.errors import PreconditionError
from metadapt.search_space import AlphaTable, Edge, weighted_sum

LOG_CLAMP = 1e-20


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 1.0
    decay: float = 1.0
    floor: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0 or self.floor <= 0 or self.decay <= 0:
            raise PreconditionError("Gumbel temperature, decay and floor must be positive")

    def temperature_at(self, epoch: int) -> float:
        """Exponential decay per completed epoch, never below the floor."""
        if self.decay == 1.0:
            return self.temperature
        return max(self.floor, self.temperature * self.decay**epoch)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.gumbel(size=shape).astype(DTYPE)


def gumbel_sample(
    alpha_probs: Tensor,
    temperature: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """z = softmax((log p + g) / temperature) with g standard Gumbel.

    Pass ``noise`` to reuse a previous draw (e.g. across the passes of one
    optimisation step).
    """
    if temperature <= 0:
        raise PreconditionError("temperature must be positive")
    if noise is None:
        if rng is None:
            raise PreconditionError("either rng or noise is required")
        noise = gumbel_noise(alpha_probs.shape, rng)
    logp = clamp_min(alpha_probs, LOG_CLAMP).log()
    return softmax((logp + Tensor(noise)) * (1.0 / temperature))


def mixed_op_stochastic(x: Tensor, edge_ops, z: Tensor) -> Tensor:
    return weighted_sum(x, edge_ops, z)


def test_time_select(alpha_probs) -> np.ndarray:
    p = np.asarray(alpha_probs.data if isinstance(alpha_probs, Tensor) else alpha_probs)
    z = np.zeros(p.shape, dtype=DTYPE)
    z[int(np.argmax(p))] = 1.0
    return z


class GumbelSampler:
    """Holds one noise draw per edge; ``resample`` advances to a new draw."""

    def __init__(self, cfg: GumbelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.temperature = cfg.temperature
        self.noise: dict[Edge, np.ndarray] = {}

    def set_epoch(self, epoch: int) -> None:
        self.temperature = self.cfg.temperature_at(epoch)

    def resample(self, alpha: AlphaTable) -> None:
        self.noise = {e: gumbel_noise(len(alpha.ops), self.rng) for e in alpha.edges}

    def edge_weights(self, alpha: AlphaTable) -> dict[Edge, Tensor]:
        if not self.noise:
            self.resample(alpha)
        return {e: gumbel_sample(softmax(alpha.logits[e]), self.temperature, noise=self.noise[e]) for e in alpha.edges}
