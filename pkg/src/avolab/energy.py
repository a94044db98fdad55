"""Unnormalized log-target densities.

Six 2D toy energies (kinds "a".."f"), where each formula is read directly as
log f~(z); a generic scaled Gaussian; and the log joint of the biased noise
model, whose observation std is a small learned network of z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from avolab import tape as T
from avolab.dist import DiagGaussian, positive_scale, inverse_positive_scale

ETA = 0.75
TOY_KINDS = ("a", "b", "c", "d", "e", "f")

# four-mode mixture (kind "d"): weights, centres, per-dimension std
MIXTURE_WEIGHTS = np.array([0.1, 0.3, 0.4, 0.2])
MIXTURE_CENTERS = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
MIXTURE_STD = 0.2


@dataclass(frozen=True)
class EnergySpec:
    """A closed-form log f~.

    kind: one of "a".."f", "fourmode" (alias of "d"), "gaussian" or
    "noise_posterior". Gaussian uses ``mu``, ``sigma`` and an additive
    ``log_scale``; noise_posterior uses ``x`` and ``decoder``.
    """

    kind: str
    mu: Any = None
    sigma: Any = None
    log_scale: float = 0.0
    x: Any = None
    decoder: Any = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind == "fourmode":
            kind = "d"
        object.__setattr__(self, "kind", kind)
        if kind not in TOY_KINDS + ("gaussian", "noise_posterior"):
            raise ValueError(f"unknown energy kind {self.kind!r}")
        if kind == "gaussian" and (self.mu is None or self.sigma is None):
            raise ValueError("gaussian energy needs mu and sigma")
        if kind == "noise_posterior" and (self.x is None or self.decoder is None):
            raise ValueError("noise_posterior energy needs x and decoder")

    @property
    def dim(self) -> int:
        if self.kind in TOY_KINDS:
            return 2
        if self.kind == "gaussian":
            return int(np.shape(T.value(self.mu))[-1])
        return 1

    def log_density(self, z):
        return log_density(self, z)

    @classmethod
    def gaussian(cls, mu, sigma, log_scale=0.0):
        return cls("gaussian", mu=np.atleast_1d(np.asarray(mu, float)),
                   sigma=np.atleast_1d(np.asarray(sigma, float)), log_scale=log_scale)

    @classmethod
    def toy(cls, kind):
        return cls(kind)


def _half_sq(u):
    return T.mul(T.square(u), -0.5)


def _energy_a(z):
    z1 = T.take(z, 0)
    ring = _half_sq(T.div(T.sub(T.norm(z), 2.0), 0.4))
    left = _half_sq(T.div(T.sub(z1, 2.0), 0.6))
    right = _half_sq(T.div(T.add(z1, 2.0), 0.6))
    return T.add(ring, T.logsumexp(T.stack([left, right])))


def _energy_b(z):
    z1, z2 = T.take(z, 0), T.take(z, 1)
    ring = _half_sq(T.div(T.sub(T.norm(T.mul(z, 0.5)), 2.0), 0.5))
    t1 = _half_sq(T.div(T.sub(z1, 2.0), 0.6))
    t2 = _half_sq(T.mul(T.sin(z1), 2.0))
    t3 = _half_sq(T.div(T.add(T.add(z1, z2), 2.5), 0.6))
    return T.add(ring, T.logsumexp(T.stack([t1, t2, t3])))


def _energy_c(z):
    z1, z2 = T.take(z, 0), T.take(z, 1)
    r = T.norm(T.stack([z1, T.mul(z2, 1.0 / math.sqrt(2.0))]))
    return T.neg(T.square(T.sub(2.0, r)))


def _energy_d(z):
    comps = [T.add(T.normal_logpdf(z, c, MIXTURE_STD), math.log(w))
             for w, c in zip(MIXTURE_WEIGHTS, MIXTURE_CENTERS)]
    return T.logsumexp(T.stack(comps))


def _w1(z1):
    return T.sin(T.mul(z1, math.pi / 2.0))


def _energy_e(z):
    z1, z2 = T.take(z, 0), T.take(z, 1)
    return T.sub(_half_sq(T.div(T.sub(z2, _w1(z1)), 0.4)), T.mul(T.square(z1), 0.1))


def _energy_f(z):
    z1, z2 = T.take(z, 0), T.take(z, 1)
    w1 = _w1(z1)
    w2 = T.mul(T.exp(_half_sq(T.sub(z1, 2.0))), 3.0)
    u = T.sub(z2, w1)
    t1 = _half_sq(T.div(u, 0.35))
    t2 = _half_sq(T.div(T.add(u, w2), 0.35))
    return T.sub(T.logsumexp(T.stack([t1, t2])), T.mul(T.square(z1), 0.05))


_TOY = {"a": _energy_a, "b": _energy_b, "c": _energy_c,
        "d": _energy_d, "e": _energy_e, "f": _energy_f}


def log_density(spec: EnergySpec, z):
    """log f~(z) per sample; z has shape (..., dim)."""
    d = np.shape(T.value(z))[-1]
    if d != spec.dim:
        raise ValueError(f"energy {spec.kind!r} expects dimension {spec.dim}, got {d}")
    if spec.kind in _TOY:
        return _TOY[spec.kind](z)
    if spec.kind == "gaussian":
        return T.add(T.normal_logpdf(z, spec.mu, spec.sigma), spec.log_scale)
    return noise_model_log_joint(spec.decoder, spec.x, z)


@dataclass(frozen=True)
class AnnealedTarget:
    """Geometric bridge f0^(1-alpha) * fT^alpha; f0 is a normalized DiagGaussian."""

    f0: DiagGaussian
    fT: EnergySpec
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def log_density(self, z):
        return interp_log_density(self, z)


def interp_log_density(t: AnnealedTarget, z):
    if not 0.0 <= t.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {t.alpha}")
    if t.alpha == 1.0:
        return log_density(t.fT, z)
    log_f0 = t.f0.log_prob(z)
    if t.alpha == 0.0:
        return log_f0
    return T.add(T.mul(log_density(t.fT, z), t.alpha), T.mul(log_f0, 1.0 - t.alpha))


# ---------------------------------------------------------------- noise model


@dataclass
class StdNet:
    """z -> two observation stds: tanh hidden layer, softplus head plus floor."""

    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, rng, hidden=32, init_std=0.5):
        p = {
            "W1": rng.normal((hidden, 1)),
            "b1": np.zeros(hidden),
            "W2": rng.normal((2, hidden)) / math.sqrt(hidden),
            "b2": np.full(2, inverse_positive_scale(init_std)),
        }
        return cls(p)

    @classmethod
    def constant(cls, std, hidden=4):
        p = {
            "W1": np.zeros((hidden, 1)),
            "b1": np.zeros(hidden),
            "W2": np.zeros((2, hidden)),
            "b2": np.full(2, inverse_positive_scale(std)),
        }
        return cls(p)

    def bind(self, tape):
        return StdNet({k: tape.leaf(v) for k, v in self.params.items()})

    def __call__(self, z):
        p = self.params
        h = T.tanh(T.affine(z, p["W1"], p["b1"]))
        return positive_scale(T.affine(h, p["W2"], p["b2"]))


def decoder_mean(z):
    """(sin(pi tanh(eta z)), cos(pi tanh(eta z))) for z of shape (..., 1)."""
    a = T.mul(T.tanh(T.mul(T.take(z, 0), ETA)), math.pi)
    return T.stack([T.sin(a), T.cos(a)])


def noise_model_log_joint(theta: StdNet, x, z):
    """log N(z; 0, 1) + log N(x; decoder_mean(z), diag(theta(z)^2))."""
    prior = T.normal_logpdf(z, 0.0, 1.0)
    lik = T.normal_logpdf(x, decoder_mean(z), theta(z))
    return T.add(prior, lik)


def sample_noise_data(rng, n, noise_std=0.1):
    """Draw ``n`` points of the biased noise data set; returns (x, z)."""
    z = rng.normal((n, 1))
    x = decoder_mean(z) + noise_std * rng.normal((n, 2))
    return x, z
