"""Evaluation: importance-weighted negative KL, AIS log Z, grids, mode coverage."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from avolab import tape as T
from avolab.chain import Chain, backward_log_weights, sample_chain
from avolab.dist import DiagGaussian, Rng
from avolab.energy import EnergySpec, StdNet, log_density, noise_model_log_joint

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    negative_kl_estimate: float
    log_z_estimate: float
    mode_coverage: tuple = ()
    n_samples: int = 0
    k_inner: int = 0

    @property
    def unshifted(self) -> float:
        """Negative KL with the log normalizer removed."""
        return self.negative_kl_estimate - self.log_z_estimate

    def __post_init__(self):
        fr = np.asarray(self.mode_coverage, dtype=float)
        if fr.size and (np.any(fr < 0) or np.any(fr > 1) or fr.sum() > 1 + 1e-12):
            raise EvalError(f"invalid mode fractions {self.mode_coverage}")


# ---------------------------------------------------------------- negative KL


def _layers_q0(model, q0):
    if isinstance(model, Chain):
        return model.layers, (q0 if q0 is not None else model.q0())
    return model, q0


def negative_kl_samples(model, q0: Optional[DiagGaussian], target: EnergySpec, N: int, K: int,
                        rng: Rng, cond=None, chunk_rows: int = 20_000) -> np.ndarray:
    """Per-sample terms log f(z_T) - log (1/K) sum_k q(z_T, z_<T^k) / r(z_<T^k | z_T).

    ``model`` is a Chain or a list of layers; z_T comes from the forward chain,
    the K inner draws z_<T^k from the backward chain given z_T.
    """
    if N < 1 or K < 1:
        raise EvalError("N and K must be >= 1")
    layers, q0 = _layers_q0(model, q0)
    trace = sample_chain(layers, q0, rng, n=N, cond=cond)
    z_T = trace.z[-1]
    log_f = log_density(target, z_T)
    per = max(1, chunk_rows // K)
    log_q_hat = np.empty(N)
    for start in range(0, N, per):
        stop = min(N, start + per)
        z_rep = np.broadcast_to(z_T[start:stop], (K, stop - start, z_T.shape[-1]))
        c = None if cond is None else np.asarray(cond)[start:stop] if np.ndim(cond) == 2 else cond
        try:
            log_w = backward_log_weights(layers, q0, z_rep, rng, cond=c)
        except Exception as exc:
            raise EvalError(f"outer samples {start}..{stop}: {exc}") from exc
        log_q_hat[start:stop] = T.logsumexp(log_w, axis=0) - math.log(K)
    out = log_f - log_q_hat
    if not np.all(np.isfinite(out)):
        n = int(np.argwhere(~np.isfinite(out))[0, 0])
        raise EvalError(f"non-finite negative-KL term at outer sample {n}")
    return out


def negative_kl_estimate(model, q0: Optional[DiagGaussian], target: EnergySpec, N: int, K: int,
                         rng: Rng, cond=None) -> float:
    """Upper bound on E_q[log f - log q_T], tightening as K grows.

    Shifted by log Z of the target when the target is unnormalized.
    """
    return float(np.mean(negative_kl_samples(model, q0, target, N, K, rng, cond)))


# ---------------------------------------------------------------- AIS


def ais_log_z(f0: DiagGaussian, target: EnergySpec, n_steps: int = 100, n_chains: int = 64,
              mh_steps_per_level: int = 2, step_size: float = 0.25, rng: Optional[Rng] = None) -> float:
    """log Z of ``target`` by annealed importance sampling from normalized ``f0``.

    Geometric path with linear alphas; random-walk Metropolis-Hastings moves
    leave each intermediate density invariant.
    """
    if n_steps < 1 or n_chains < 1:
        raise EvalError("n_steps and n_chains must be >= 1")
    rng = rng if rng is not None else Rng(0)
    d = f0.dim
    mu, sigma = np.asarray(T.value(f0.mu)), np.asarray(T.value(f0.sigma))
    z = mu + sigma * rng.normal((n_chains, d))
    alphas = np.arange(n_steps + 1) / n_steps
    log_w = np.zeros(n_chains)
    accepted = np.zeros(n_chains, dtype=int)

    def log_f0(x):
        return T.normal_logpdf(x, mu, sigma)

    lf0 = log_f0(z)
    lfT = log_density(target, z)
    for t in range(1, n_steps + 1):
        log_w += (alphas[t] - alphas[t - 1]) * (lfT - lf0)
        a = alphas[t]
        for _ in range(mh_steps_per_level):
            prop = z + step_size * rng.normal((n_chains, d))
            pf0 = log_f0(prop)
            pfT = log_density(target, prop)
            log_ratio = a * (pfT - lfT) + (1.0 - a) * (pf0 - lf0)
            accept = np.log(rng.uniform(n_chains)) < log_ratio
            z = np.where(accept[:, None], prop, z)
            lf0 = np.where(accept, pf0, lf0)
            lfT = np.where(accept, pfT, lfT)
            accepted += accept
    stuck = int(np.sum(accepted == 0))
    if stuck:
        log.warning("ais_log_z: %d of %d chains never accepted a move", stuck, n_chains)
    return float(T.logsumexp(log_w, axis=0) - math.log(n_chains))


# ---------------------------------------------------------------- grids


@dataclass
class Grid2D:
    """Values on cell centres; ``values[j, i]`` sits at (x_i, y_j)."""

    bounds: tuple
    values: np.ndarray

    def __post_init__(self):
        xmin, xmax, ymin, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise EvalError(f"degenerate bounds {self.bounds}")
        ny, nx = np.shape(self.values)
        if nx < 2 or ny < 2:
            raise EvalError("grid resolution must be >= 2 on both axes")

    @property
    def resolution(self):
        ny, nx = self.values.shape
        return nx, ny

    @property
    def centers(self):
        return _centers(self.bounds, self.resolution)

    def argmax(self):
        """(x, y) of the largest cell."""
        xs, ys = self.centers
        j, i = np.unravel_index(np.argmax(self.values), self.values.shape)
        return xs[i], ys[j]


def _centers(bounds, resolution):
    xmin, xmax, ymin, ymax = bounds
    nx, ny = resolution
    xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
    ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
    return xs, ys


def _check_grid_args(bounds, resolution):
    xmin, xmax, ymin, ymax = bounds
    if not (xmin < xmax and ymin < ymax):
        raise EvalError(f"degenerate bounds {bounds}")
    if min(resolution) < 2:
        raise EvalError("grid resolution must be >= 2 on both axes")


def density_grid(source: Union[EnergySpec, Callable], bounds=(-4.0, 4.0, -4.0, 4.0),
                 resolution=(100, 100), n_samples: int = 100_000) -> Grid2D:
    """exp(log f) at cell centres for an EnergySpec, or a normalized 2D
    histogram of ``source(n_samples)`` draws for a sampler.

    ``resolution`` is (nx, ny) or a single count for a square grid.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    _check_grid_args(bounds, resolution)
    xs, ys = _centers(bounds, resolution)
    if isinstance(source, EnergySpec):
        X, Y = np.meshgrid(xs, ys)
        z = np.stack([X, Y], axis=-1)
        return Grid2D(tuple(bounds), np.exp(log_density(source, z)))
    samples = np.asarray(source(n_samples))
    H, _, _ = np.histogram2d(samples[:, 1], samples[:, 0], bins=(resolution[1], resolution[0]),
                             range=((bounds[2], bounds[3]), (bounds[0], bounds[1])))
    total = H.sum()
    return Grid2D(tuple(bounds), H / total if total > 0 else H)


def normalized(grid: Grid2D) -> np.ndarray:
    v = np.asarray(grid.values, dtype=float)
    return v / v.sum()


def tv_distance(a, b) -> float:
    """Total variation between two non-negative grids after normalizing each."""
    pa = np.asarray(a.values if isinstance(a, Grid2D) else a, dtype=float)
    pb = np.asarray(b.values if isinstance(b, Grid2D) else b, dtype=float)
    return float(0.5 * np.abs(pa / pa.sum() - pb / pb.sum()).sum())


@dataclass
class Grid1D:
    z: np.ndarray
    values: np.ndarray

    def local_maxima(self):
        v = self.values
        idx = [i for i in range(1, len(v) - 1) if v[i] > v[i - 1] and v[i] >= v[i + 1]]
        return self.z[idx]

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.z))


def true_posterior_grid(theta: StdNet, x, z_bounds=(-6.0, 6.0), resolution: int = 1201) -> Grid1D:
    """p(z | x) of the noise model on a z grid, normalized by trapezoid quadrature."""
    lo, hi = z_bounds
    if not lo < hi:
        raise EvalError(f"degenerate bounds {z_bounds}")
    if resolution < 2:
        raise EvalError("resolution must be >= 2")
    z = np.linspace(lo, hi, resolution)
    lj = noise_model_log_joint(theta, np.asarray(x, dtype=float), z[:, None])
    w = np.exp(lj - lj.max())
    return Grid1D(z, w / np.trapezoid(w, z))


# ---------------------------------------------------------------- mode coverage


def mode_coverage(samples, centers: Sequence, radius: float) -> tuple:
    """Fraction of samples whose nearest centre lies within ``radius``, per centre."""
    samples = np.asarray(samples, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if samples.size == 0:
        raise EvalError("no samples")
    if centers.size == 0:
        raise EvalError("no centres")
    if radius <= 0:
        raise EvalError("radius must be positive")
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=-1)
    nearest = d.argmin(axis=1)
    within = d.min(axis=1) < radius
    return tuple(float(np.mean(within & (nearest == j))) for j in range(len(centers)))


# ---------------------------------------------------------------- grid files


def write_grid_csv(grid: Grid2D, path) -> None:
    """Header line ``# xmin,xmax,ymin,ymax,nx,ny`` then one CSV row per y (ymin first)."""
    xmin, xmax, ymin, ymax = grid.bounds
    nx, ny = grid.resolution
    with open(path, "w") as fh:
        fh.write(f"# {xmin!r},{xmax!r},{ymin!r},{ymax!r},{nx},{ny}\n")
        for row in grid.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid_csv(path) -> Grid2D:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise EvalError(f"{path}:1: missing grid header")
    try:
        head = lines[0][1:].split(",")
        bounds = tuple(float(v) for v in head[:4])
        nx, ny = int(head[4]), int(head[5])
    except (ValueError, IndexError):
        raise EvalError(f"{path}:1: malformed grid header") from None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise EvalError(f"{path}:{lineno}: non-numeric value") from None
        if len(row) != nx:
            raise EvalError(f"{path}:{lineno}: expected {nx} values, got {len(row)}")
        rows.append(row)
    if len(rows) != ny:
        raise EvalError(f"{path}: expected {ny} rows, got {len(rows)}")
    return Grid2D(bounds, np.array(rows))


def write_pgm(grid: Grid2D, path) -> None:
    """Plain PGM (P2), 8-bit, min-max scaled, top row = ymax."""
    v = np.asarray(grid.values, dtype=float)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(int)[::-1]
    nx, ny = grid.resolution
    with open(path, "w") as fh:
        fh.write(f"P2\n{nx} {ny}\n255\n")
        for row in pix:
            fh.write(" ".join(str(p) for p in row) + "\n")
