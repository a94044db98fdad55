"""Training objectives and annealing schedules.

All objectives return quantities to be *maximized*; trainers negate them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from avolab import tape as T
from avolab.chain import log_q_joint, log_r_joint, sample_chain
from avolab.dist import DiagGaussian, Rng, sample_reparam
from avolab.energy import AnnealedTarget, EnergySpec, log_density

MODES = ("elbo", "avo", "lcavo", "iwae")


@dataclass(frozen=True)
class Schedule:
    """Linear alpha bridge over T layers and a linear beta warm-up.

    beta starts at ``beta0`` and reaches 1 after a fraction ``rho`` of the
    total training steps; ``rho == 0`` means no warm-up.
    """

    T: int
    beta0: float = 0.01
    rho: float = 0.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError(f"beta0 must lie in (0, 1], got {self.beta0}")

    @property
    def alphas(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    def beta(self, step: int, total_steps: int) -> float:
        if self.rho == 0.0 or step >= self.rho * total_steps:
            return 1.0
        return min(1.0, self.beta0 + (1.0 - self.beta0) * step / (self.rho * total_steps))


def schedule_values(schedule: Schedule, step: int, total_steps: int):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= schedule.rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {schedule.rho}")
    return schedule.alphas, schedule.beta(step, total_steps)


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str = "avo"
    a: float = 0.5
    iwae_samples: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"a must lie in [0, 1], got {self.a}")
        if self.iwae_samples < 1:
            raise ValueError("iwae_samples must be >= 1")


def _check_beta(beta):
    """beta is a scalar or, for ensembles, an (E, 1) array of per-member values."""
    b = np.asarray(beta)
    if not (np.all(b > 0.0) and np.all(b <= 1.0)):
        raise ValueError(f"beta must lie in (0, 1], got {beta}")


def _is_one(beta):
    return np.ndim(beta) == 0 and beta == 1.0


def elbo_terms(trace, target: EnergySpec, beta: float = 1.0):
    """Per-sample log f(z_T) + beta * (log r(z_<T | z_T) - log q(z_T, z_<T))."""
    _check_beta(beta)
    log_f = log_density(target, trace.z[-1])
    if not np.all(np.isfinite(T.value(log_f))):
        raise ValueError("non-finite target evaluation")
    ent = T.sub(log_r_joint(trace), log_q_joint(trace))
    if not _is_one(beta):
        ent = T.mul(ent, beta)
    return T.add(log_f, ent)


def elbo(trace, target: EnergySpec, beta: float = 1.0):
    """Batch mean of ``elbo_terms``."""
    return T.mean(elbo_terms(trace, target, beta))


def _bridge(target, alpha, f0=None):
    f0 = f0 if f0 is not None else DiagGaussian.standard(target.dim)
    return AnnealedTarget(f0, target, float(alpha))


def avo_step_terms(trace, target: EnergySpec, alphas, beta: float = 1.0, f0=None):
    """Per-sample sum over layers of the annealed per-layer objectives.

    ``trace`` must have been sampled with ``detach_inputs=True``.
    """
    _check_beta(beta)
    if len(alphas) != trace.T + 1:
        raise ValueError(f"need {trace.T + 1} alphas, got {len(alphas)}")
    total = None
    for t in range(1, trace.T + 1):
        bridge = _bridge(target, alphas[t], f0)
        ent = T.sub(trace.log_r_bwd[t - 1], trace.log_q_fwd[t - 1])
        if not _is_one(beta):
            ent = T.mul(ent, beta)
        term = T.add(bridge.log_density(trace.z[t]), ent)
        total = term if total is None else T.add(total, term)
    return total


def total_avo_step_loss(layers, q0: DiagGaussian, target: EnergySpec, schedule, beta: float,
                        rng: Rng, n: int = 64, cond=None, f0=None):
    """Sum over t of the layer-t annealed objective on one shared trace (batch mean).

    ``schedule`` is a Schedule or a sequence of alphas.
    """
    alphas = schedule.alphas if isinstance(schedule, Schedule) else np.asarray(schedule)
    trace = sample_chain(layers, q0, rng, cond=cond, n=n, detach_inputs=True)
    return T.mean(avo_step_terms(trace, target, alphas, beta, f0))


def avo_layer_loss(t: int, layers, q0: DiagGaussian, target_pair: AnnealedTarget, rng: Rng,
                   n: int = 64, cond=None, beta: float = 1.0):
    """Layer-t annealed objective, batch mean.

    The chain up to z_{t-1} is detached, so only layer t's forward and
    backward parameters receive gradient. The -log q_{t-1}(z_{t-1}) term is
    dropped: it does not depend on layer t once z_{t-1} is detached.
    """
    if not 1 <= t <= len(layers):
        raise IndexError(f"layer index {t} outside [1, {len(layers)}]")
    trace = sample_chain(layers[:t], q0, rng, cond=cond, n=n, detach_inputs=True)
    ent = T.sub(trace.log_r_bwd[-1], trace.log_q_fwd[-1])
    if not _is_one(beta):
        ent = T.mul(ent, beta)
    return T.mean(T.add(target_pair.log_density(trace.z[-1]), ent))


def loss_calibrated_select(a: float, rng: Rng) -> str:
    """'avo' with probability a, otherwise 'elbo'."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"a must lie in [0, 1], got {a}")
    return "avo" if rng.uniform() < a else "elbo"


def iwae_bound(q_proposal: DiagGaussian, target: EnergySpec, K: int, rng: Rng, batch_shape=()):
    """log mean_k exp(log f(z_k) - log q(z_k)), z_k ~ q, averaged over the batch.

    Samples have shape (K, *batch_shape, d); ``target`` may hold batched
    parameters (e.g. one data point per batch row).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    d = q_proposal.dim
    eps = rng.normal((K,) + tuple(batch_shape) + (d,))
    z = sample_reparam(q_proposal, eps)
    log_w = T.sub(log_density(target, z), q_proposal.log_prob(z))
    bound = T.sub(T.logsumexp(log_w, axis=0), math.log(K))
    return T.mean(bound)
