"""Diagonal Gaussians and the seeded random source."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from avolab import tape as T

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class DiagGaussian:
    """N(mu, diag(sigma^2)). ``mu`` and ``sigma`` may be arrays or tape Vars."""

    mu: Any
    sigma: Any

    def __post_init__(self):
        s = T.value(self.sigma)
        if s.min() <= 0:
            raise ValueError("DiagGaussian: sigma must be strictly positive")
        if np.shape(T.value(self.mu))[-1:] != np.shape(s)[-1:]:
            raise ValueError("DiagGaussian: mu and sigma dimensions differ")

    @property
    def dim(self) -> int:
        return int(np.shape(T.value(self.mu))[-1])

    @classmethod
    def standard(cls, d: int) -> "DiagGaussian":
        return cls(np.zeros(d), np.ones(d))

    def log_prob(self, z):
        return log_prob(self, z)

    def sample(self, eps):
        return sample_reparam(self, eps)


def log_prob(g: DiagGaussian, z):
    """Sum over the last axis of the per-dimension normal log-density."""
    if np.shape(T.value(z))[-1] != g.dim:
        raise ValueError(f"log_prob: z has dimension {np.shape(T.value(z))[-1]}, expected {g.dim}")
    return T.normal_logpdf(z, g.mu, g.sigma)


def sample_reparam(g: DiagGaussian, eps):
    """mu + sigma * eps, differentiable through mu and sigma."""
    if np.shape(eps)[-1] != g.dim:
        raise ValueError(f"sample_reparam: eps has dimension {np.shape(eps)[-1]}, expected {g.dim}")
    return T.add(g.mu, T.mul(g.sigma, eps))


def positive_scale(pre_activation):
    """softplus(x) + floor; the map every scale head goes through."""
    return T.add(T.softplus(pre_activation), SIGMA_FLOOR)


def inverse_positive_scale(sigma: float) -> float:
    """Pre-activation that ``positive_scale`` maps to ``sigma``."""
    y = sigma - SIGMA_FLOOR
    if y <= 0:
        raise ValueError("sigma must exceed the floor")
    return float(y + np.log(-np.expm1(-y)))


class Rng:
    """Seeded stream of uniforms and standard normals.

    Built on numpy's PCG64 bit generator (fixed algorithm, platform
    independent). Normals use the Box-Muller transform on pairs of uniforms,
    so the stream does not depend on numpy's internal normal sampler.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)


def draw_standard_normal(rng: Rng, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be >= 1")
    return rng.normal(d)


class EnsembleRng:
    """One Rng per ensemble member; draws are stacked on a new leading axis.

    Member k's slice equals what ``Rng(seed_k)`` alone would produce.
    """

    def __init__(self, seeds):
        self.members = [Rng(s) for s in seeds]

    def normal(self, shape) -> np.ndarray:
        return np.stack([r.normal(shape) for r in self.members])

    def uniform(self, size=None):
        return np.stack([r.uniform(size) for r in self.members])

    def spawn(self, key: int) -> "EnsembleRng":
        out = EnsembleRng.__new__(EnsembleRng)
        out.members = [r.spawn(key) for r in self.members]
        return out
