"""Experiment procedures: energy fitting, the beta-annealing sweep and the
noise-model comparison.

Energy fits are run as ensembles: members share one tape and one
vectorized forward/backward pass but nothing else, so member k of a group
produces bit-for-bit the same numbers as a solo run with the same seed.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Optional, Sequence

import numpy as np

from avolab import tape as T
from avolab.chain import Chain, ChainConfig, ChainError, GaussianEncoder, sample_chain
from avolab.dist import DiagGaussian, EnsembleRng, Rng
from avolab.energy import (MIXTURE_CENTERS, EnergySpec, StdNet, decoder_mean,
                           noise_model_log_joint, sample_noise_data)
from avolab.evaluate import (EvalError, EvalReport, Grid1D, Grid2D, ais_log_z, density_grid,
                             mode_coverage, negative_kl_estimate, true_posterior_grid, tv_distance)
from avolab.objective import Schedule, avo_step_terms, elbo_terms, loss_calibrated_select
from avolab.optim import AdamState, adam_step

log = logging.getLogger(__name__)

ENERGY_MODES = ("elbo", "avo")
NOISE_VARIANTS = ("iwae", "vae", "avo")
COVERAGE_RADIUS = 0.6
AMBIGUOUS_X = (0.0, -1.0)

# rng stream keys below a run's seed
_INIT, _TRAIN, _FINAL, _AIS, _COVER = 0, 1, 2, 3, 4
_CKPT = 1000


class DivergenceError(RuntimeError):
    """A non-finite loss or parameter; ``step`` is the failing update index."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"diverged at step {step}" + (f": {detail}" if detail else ""))


@dataclass
class ExperimentResult:
    """Checkpointed metric series plus final evaluation for one run."""

    steps: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    report: Optional[EvalReport] = None
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)
    model: Any = None

    def metric_rows(self):
        """(step, metric, value) triples: checkpoint series, then final scalars."""
        for name, values in self.series.items():
            if len(values) != len(self.steps):
                raise ValueError(f"series {name!r} has {len(values)} entries for {len(self.steps)} checkpoints")
        for i, step in enumerate(self.steps):
            for name in self.series:
                yield step, name, self.series[name][i]
        last = self.steps[-1] if self.steps else 0
        for name, value in self.final.items():
            yield last, name, value


# ---------------------------------------------------------------- energy fits


@dataclass(frozen=True)
class EnergyFitConfig:
    mode: str = "avo"
    total_steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    T: int = 10
    hidden: int = 32
    beta0: float = 0.01
    checkpoint_every: int = 200
    checkpoint_n: int = 256
    checkpoint_k: int = 50
    eval_n: int = 10_000
    eval_k: int = 2000
    ais_steps: int = 500
    ais_chains: int = 512

    def __post_init__(self):
        if self.mode not in ENERGY_MODES:
            raise ValueError(f"mode must be one of {ENERGY_MODES}, got {self.mode!r}")
        for name in ("total_steps", "batch", "T", "hidden", "checkpoint_every",
                     "checkpoint_n", "checkpoint_k", "eval_n", "eval_k", "ais_steps", "ais_chains"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError(f"beta0 must lie in (0, 1], got {self.beta0}")


def _all_finite(arrays) -> bool:
    return math.isfinite(sum(float(np.add.reduce(a, axis=None)) for a in arrays))


def _target_log_z(target: EnergySpec, seed: int, cfg: EnergyFitConfig) -> float:
    return ais_log_z(DiagGaussian.standard(target.dim), target, n_steps=cfg.ais_steps,
                     n_chains=cfg.ais_chains, rng=Rng(seed).spawn(_AIS))


def _fit_energy_group(target: EnergySpec, cfg: EnergyFitConfig, rhos: Sequence[float],
                      seeds: Sequence[int], log_z: Optional[float] = None) -> list:
    """Train one ensemble, member k with warm-up fraction rhos[k] and seed seeds[k]."""
    t0 = time.perf_counter()
    E = len(seeds)
    d = target.dim
    schedules = [Schedule(cfg.T, cfg.beta0, float(r)) for r in rhos]
    chain_cfg = ChainConfig(T=cfg.T, latent_dim=d, hidden=cfg.hidden)
    ens = Chain.stack([Chain.init(chain_cfg, Rng(s).spawn(_INIT)) for s in seeds])
    rng = EnsembleRng(seeds).spawn(_TRAIN)
    q0 = DiagGaussian.standard(d)
    alphas = schedules[0].alphas
    avo = cfg.mode == "avo"
    params = ens.parameters()
    state = AdamState(lr=cfg.lr)

    steps, window, n_window = [], np.zeros(E), 0
    series = [{"loss": [], "beta": [], "negative_kl": []} for _ in range(E)]
    for step in range(cfg.total_steps):
        betas = np.array([s.beta(step, cfg.total_steps) for s in schedules])
        beta = 1.0 if np.all(betas == 1.0) else betas[:, None]
        tape = T.Tape()
        bound, leaves = ens.with_parameters(params).bind(tape)
        try:
            trace = sample_chain(bound.layers, q0, rng, n=cfg.batch, detach_inputs=avo)
            terms = (avo_step_terms(trace, target, alphas, beta) if avo
                     else elbo_terms(trace, target, beta))
            objective = T.mean(terms, axis=-1)
            values = T.value(objective)
            if not np.all(np.isfinite(values)):
                bad = [int(k) for k in np.flatnonzero(~np.isfinite(values))]
                raise DivergenceError(step, f"non-finite loss for members {bad}")
            grads = tape.backward(T.neg(T.sum(objective)))
        except (ChainError, T.TapeError, ValueError, FloatingPointError) as exc:
            if isinstance(exc, DivergenceError):
                raise
            raise DivergenceError(step, str(exc)) from exc
        params = adam_step(params, {k: grads[v] for k, v in leaves.items()}, state)
        if not _all_finite(params.values()):
            raise DivergenceError(step, "non-finite parameter")
        window -= values
        n_window += 1
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.total_steps:
            current = ens.with_parameters(params)
            steps.append(step + 1)
            for k, seed in enumerate(seeds):
                member = current.member(k)
                nkl = negative_kl_estimate(member, q0, target, cfg.checkpoint_n, cfg.checkpoint_k,
                                           Rng(seed).spawn(_CKPT + step + 1))
                series[k]["loss"].append(float(window[k] / n_window))
                series[k]["beta"].append(float(betas[k]))
                series[k]["negative_kl"].append(nkl)
            window[:] = 0.0
            n_window = 0

    final = ens.with_parameters(params)
    elapsed = time.perf_counter() - t0
    results = []
    for k, seed in enumerate(seeds):
        member = final.member(k)
        t1 = time.perf_counter()
        lz = log_z if log_z is not None else _target_log_z(target, seed, cfg)
        nkl = negative_kl_estimate(member, q0, target, cfg.eval_n, cfg.eval_k, Rng(seed).spawn(_FINAL))
        cover = ()
        if target.kind == "d":
            z = sample_chain(member.layers, q0, Rng(seed).spawn(_COVER), n=cfg.eval_n).z[-1]
            cover = mode_coverage(z, MIXTURE_CENTERS, COVERAGE_RADIUS)
        report = EvalReport(nkl, lz, cover, cfg.eval_n, cfg.eval_k)
        final_metrics = {"final_negative_kl": nkl, "log_z": lz,
                         "final_negative_kl_unshifted": report.unshifted}
        for j, frac in enumerate(cover):
            final_metrics[f"mode_fraction_{j}"] = frac
        config = dict(vars(cfg), target=target.kind, rho=float(rhos[k]), seed=int(seed))
        results.append(ExperimentResult(
            steps=list(steps), series=series[k], report=report, final=final_metrics,
            wall_clock=elapsed / E + time.perf_counter() - t1, seed=int(seed),
            config=config, model=member))
    return results


def fit_energy(target: EnergySpec, mode: str = "avo", schedule: Optional[Schedule] = None,
               total_steps: int = 2000, batch: int = 64, lr: float = 1e-3, T: int = 10,
               seed: int = 0, **options) -> ExperimentResult:
    """Fit a T-layer chain to ``target`` with the ELBO or the annealed objective.

    ``schedule`` supplies the beta warm-up (rho, beta0); its T must match.
    Extra ``options`` go to EnergyFitConfig (hidden, checkpoint and
    evaluation sizes).
    """
    schedule = schedule if schedule is not None else Schedule(T)
    if schedule.T != T:
        raise ValueError(f"schedule has T={schedule.T} but T={T} was requested")
    cfg = EnergyFitConfig(mode=mode, total_steps=total_steps, batch=batch, lr=lr, T=T,
                          beta0=schedule.beta0, **options)
    return fit_energy_ensemble(target, cfg, [schedule.rho], [seed])[0]


def fit_energy_ensemble(target: EnergySpec, cfg: EnergyFitConfig, rhos, seeds,
                        log_z: Optional[float] = None) -> list:
    """Several independent fits trained side by side; one result per seed."""
    if len(rhos) != len(seeds) or not seeds:
        raise ValueError("need one rho per seed and at least one seed")
    for r in rhos:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {r}")
    return _fit_energy_group(target, cfg, rhos, seeds, log_z)


# ---------------------------------------------------------------- sweep

# smaller evaluation budget than a single fit: 600 runs share one core here
SWEEP_CONFIG = EnergyFitConfig(checkpoint_n=128, checkpoint_k=32, eval_n=1000, eval_k=100)


@dataclass
class SweepCell:
    target: str
    mode: str
    rho: float
    trial: int
    seed: int
    result: Optional[ExperimentResult] = None
    error: str = ""


@dataclass
class SweepResult:
    cells: list
    log_z: dict
    config: dict = field(default_factory=dict)

    def value(self, cell: SweepCell) -> float:
        return cell.result.report.unshifted if cell.result else float("nan")

    def summary(self) -> list:
        """Per (target, mode, rho): trial count, failures, mean/std of the
        final unshifted negative KL over successful trials."""
        groups: dict = {}
        for c in self.cells:
            groups.setdefault((c.target, c.mode, c.rho), []).append(c)
        rows = []
        for (target, mode, rho), cells in groups.items():
            vals = np.array([self.value(c) for c in cells if c.result is not None])
            rows.append({
                "target": target, "mode": mode, "rho": rho, "trials": len(cells),
                "failed": sum(c.result is None for c in cells),
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std(ddof=1)) if vals.size > 1 else float("nan"),
            })
        return rows

    def table(self, target: str, mode: str) -> tuple:
        """(rhos, means, stds) for one target and mode, rho ascending."""
        rows = sorted((r for r in self.summary() if r["target"] == target and r["mode"] == mode),
                      key=lambda r: r["rho"])
        return (np.array([r["rho"] for r in rows]), np.array([r["mean"] for r in rows]),
                np.array([r["std"] for r in rows]))


def sweep_cells(targets, modes, rho_values, trials: int, seed_base: int) -> list:
    """Cells in canonical order; cell i gets seed seed_base + i."""
    cells = []
    for target in targets:
        for mode in modes:
            for rho in rho_values:
                for trial in range(trials):
                    cells.append(SweepCell(target, mode, float(rho), trial, seed_base + len(cells)))
    return cells


def _run_group(cells, target_kind, cfg: EnergyFitConfig, log_z: float):
    target = EnergySpec(target_kind)
    rhos = [c.rho for c in cells]
    seeds = [c.seed for c in cells]
    try:
        return [(r, "") for r in _fit_energy_group(target, cfg, rhos, seeds, log_z)]
    except DivergenceError as exc:
        log.warning("group %s/%s diverged (%s); rerunning members one by one", target_kind, cfg.mode, exc)
    out = []
    for rho, seed in zip(rhos, seeds):
        try:
            out.append((_fit_energy_group(target, cfg, [rho], [seed], log_z)[0], ""))
        except (DivergenceError, EvalError) as exc:
            out.append((None, str(exc)))
    return out


def _run_group_job(job):
    cells, kind, cfg, lz = job
    return _run_group(cells, kind, cfg, lz)


def worker_count() -> int:
    env = os.environ.get("AVO_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"AVO_THREADS must be >= 1, got {env}")
        return n
    return os.cpu_count() or 1


def robustness_sweep(targets: Sequence[str] = ("a", "b", "c", "d", "e", "f"),
                     modes: Sequence[str] = ENERGY_MODES,
                     rho_values: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8),
                     trials: int = 10, seed_base: int = 0,
                     config: Optional[EnergyFitConfig] = None,
                     workers: Optional[int] = None) -> SweepResult:
    """Final negative KL for every (target, mode, rho, trial) cell.

    Cells sharing a target and mode train as one ensemble; groups run in
    ``workers`` processes (default: AVO_THREADS or the core count). A
    diverging cell is recorded with its error and the sweep goes on.
    """
    for r in rho_values:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {r}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = config if config is not None else SWEEP_CONFIG
    cells = sweep_cells(targets, modes, rho_values, trials, seed_base)
    log_z = {t: _target_log_z(EnergySpec(t), seed_base, base) for t in targets}
    jobs = []
    for target in targets:
        for mode in modes:
            group = [c for c in cells if c.target == target and c.mode == mode]
            cfg = EnergyFitConfig(**dict(vars(base), mode=mode))
            jobs.append((group, target, cfg, log_z[target]))
    workers = workers if workers is not None else worker_count()
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            outputs = pool.map(_run_group_job, jobs)
    else:
        outputs = [_run_group_job(j) for j in jobs]
    for (group, *_), out in zip(jobs, outputs):
        for cell, (res, err) in zip(group, out):
            cell.result, cell.error = res, err
    return SweepResult(cells, log_z, dict(vars(base), targets=list(targets), modes=list(modes),
                                          rho_values=list(rho_values), trials=trials,
                                          seed_base=seed_base))


# ---------------------------------------------------------------- result files

METRIC_FIELDS = ("target", "mode", "rho", "trial", "step", "metric", "value")
SUMMARY_FIELDS = ("target", "mode", "rho", "trials", "failed", "mean", "std")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, cells) -> int:
    """Long-format metrics.csv from SweepCell-like records; returns rows written."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for c in cells:
            if c.result is None:
                w.writerow([c.target, c.mode, _fmt(c.rho), c.trial, 0, "error", c.error])
                n += 1
                continue
            for step, name, value in c.result.metric_rows():
                w.writerow([c.target, c.mode, _fmt(c.rho), c.trial, step, name, _fmt(float(value))])
                n += 1
    return n


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SUMMARY_FIELDS])


# ---------------------------------------------------------------- noise model


@dataclass
class NoiseModelParams:
    """Learned decoder std net plus the variant's inference network."""

    variant: str
    decoder: StdNet
    encoder: Optional[GaussianEncoder] = None
    chain: Optional[Chain] = None

    def posterior_samples(self, x, n: int, rng: Rng) -> np.ndarray:
        """n draws of z ~ q(z | x) for one data point x; shape (n,).

        IWAE's proposal is the prior, so its draws ignore x.
        """
        xb = np.broadcast_to(np.asarray(x, dtype=float), (n, 2))
        if self.variant == "iwae":
            return rng.normal((n, 1))[:, 0]
        if self.variant == "vae":
            q = self.encoder(xb)
            return (q.mu + q.sigma * rng.normal((n, 1)))[:, 0]
        trace = sample_chain(self.chain.layers, self.chain.q0(xb), rng, cond=xb)
        return trace.z[-1][:, 0]

    def log_marginal_grid(self, bounds=(-2.0, 2.0, -2.0, 2.0), resolution=(100, 100),
                          z_bounds=(-6.0, 6.0), z_points: int = 401) -> Grid2D:
        """p(x) of the learned model on a 2D grid, by quadrature over z."""
        from avolab.evaluate import _centers

        xs, ys = _centers(bounds, resolution)
        X, Y = np.meshgrid(xs, ys)
        pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
        z = np.linspace(z_bounds[0], z_bounds[1], z_points)[:, None]
        mean = decoder_mean(z)
        std = self.decoder(z)
        prior = T.normal_logpdf(z, 0.0, 1.0)
        dz = z[1, 0] - z[0, 0]
        out = np.empty(len(pts))
        for s in range(0, len(pts), 2000):
            block = pts[s:s + 2000]
            lj = T.normal_logpdf(block[:, None, :], mean[None], std[None]) + prior[None]
            out[s:s + 2000] = np.exp(T.logsumexp(lj, axis=1) + math.log(dz))
        return Grid2D(tuple(bounds), out.reshape(resolution[1], resolution[0]))


@dataclass(frozen=True)
class NoiseFitConfig:
    variant: str = "avo"
    n_data: int = 10_000
    steps: int = 5000
    batch: int = 128
    lr: float = 1e-3
    K: int = 500
    T: int = 10
    a: float = 0.5
    hidden: int = 32
    noise_std: float = 0.1
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.variant not in NOISE_VARIANTS:
            raise ValueError(f"variant must be one of {NOISE_VARIANTS}, got {self.variant!r}")
        for name in ("n_data", "steps", "batch", "K", "T", "hidden", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0 or not self.noise_std > 0:
            raise ValueError("lr and noise_std must be positive")
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"a must lie in [0, 1], got {self.a}")


def _noise_init(cfg: NoiseFitConfig, rng: Rng) -> NoiseModelParams:
    dec = StdNet.init(rng, hidden=cfg.hidden)
    if cfg.variant == "vae":
        return NoiseModelParams("vae", dec, encoder=GaussianEncoder.init(rng, 2, 1, cfg.hidden))
    if cfg.variant == "avo":
        chain = Chain.init(ChainConfig(T=cfg.T, latent_dim=1, hidden=cfg.hidden, amortized=True,
                                       condition_dim=2, learn_q0=True), rng)
        return NoiseModelParams("avo", dec, chain=chain)
    return NoiseModelParams("iwae", dec)


def _flatten(model: NoiseModelParams) -> dict:
    flat = {f"dec.{k}": v for k, v in model.decoder.params.items()}
    if model.encoder is not None:
        flat.update({f"enc.{k}": v for k, v in model.encoder.params.items()})
    if model.chain is not None:
        flat.update({f"chain.{k}": v for k, v in model.chain.parameters().items()})
    return flat


def _unflatten(model: NoiseModelParams, flat: dict) -> NoiseModelParams:
    dec = StdNet({k[4:]: v for k, v in flat.items() if k.startswith("dec.")})
    enc = chain = None
    if model.encoder is not None:
        enc = GaussianEncoder({k[4:]: v for k, v in flat.items() if k.startswith("enc.")})
    if model.chain is not None:
        chain = model.chain.with_parameters({k[6:]: v for k, v in flat.items() if k.startswith("chain.")})
    return NoiseModelParams(model.variant, dec, enc, chain)


def _noise_objective(model: NoiseModelParams, cfg: NoiseFitConfig, x, rng: Rng):
    """Batch-mean training objective (to maximize) for one minibatch."""
    if model.variant == "iwae":
        z = rng.normal((cfg.K,) + x.shape[:-1] + (1,))
        # prior proposal: the importance weight is the likelihood alone
        log_w = T.normal_logpdf(x, decoder_mean(z), model.decoder(z))
        return T.mean(T.sub(T.logsumexp(log_w, axis=0), math.log(cfg.K)))
    if model.variant == "vae":
        q = model.encoder(x)
        z = T.add(q.mu, T.mul(q.sigma, rng.normal(x.shape[:-1] + (1,))))
        return T.mean(T.sub(noise_model_log_joint(model.decoder, x, z), q.log_prob(z)))
    target = EnergySpec("noise_posterior", x=x, decoder=model.decoder)
    q0 = model.chain.q0(x)
    if loss_calibrated_select(cfg.a, rng) == "avo":
        trace = sample_chain(model.chain.layers, q0, rng, cond=x, detach_inputs=True)
        alphas = Schedule(cfg.T).alphas
        return T.mean(avo_step_terms(trace, target, alphas, 1.0, DiagGaussian.standard(1)))
    trace = sample_chain(model.chain.layers, q0, rng, cond=x)
    return T.mean(elbo_terms(trace, target))


def noise_data(cfg: NoiseFitConfig, seed: int) -> np.ndarray:
    x, _ = sample_noise_data(Rng(seed).spawn(_INIT + 100), cfg.n_data, cfg.noise_std)
    return x


def fit_noise_model(variant: str = "avo", n_data: int = 10_000, steps: int = 5000, lr: float = 1e-3,
                    seed: int = 0, **options):
    """Train the decoder std net with one of three inference schemes.

    Returns (NoiseModelParams, ExperimentResult). The result's ``final``
    dict holds the TV distance of the learned p(x) to the data histogram and
    the tail masses of q(z | x=(0,-1)); ``model`` carries the grids.
    """
    t0 = time.perf_counter()
    cfg = NoiseFitConfig(variant=variant, n_data=n_data, steps=steps, lr=lr, **options)
    x_data = noise_data(cfg, seed)
    model = _noise_init(cfg, Rng(seed).spawn(_INIT))
    params = _flatten(model)
    state = AdamState(lr=cfg.lr)
    rng = Rng(seed).spawn(_TRAIN)
    steps_out, losses, window, n_window = [], [], 0.0, 0
    for step in range(cfg.steps):
        idx = rng.integers(0, cfg.n_data, cfg.batch)
        tape = T.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        bound = _unflatten(model, leaves)
        try:
            obj = _noise_objective(bound, cfg, x_data[idx], rng)
            value = float(T.value(obj))
            if not math.isfinite(value):
                raise DivergenceError(step, "non-finite loss")
            grads = tape.backward(T.neg(obj))
        except (ChainError, T.TapeError, FloatingPointError) as exc:
            raise DivergenceError(step, str(exc)) from exc
        params = adam_step(params, {k: grads[v] for k, v in leaves.items()}, state)
        if not _all_finite(params.values()):
            raise DivergenceError(step, "non-finite parameter")
        window -= value
        n_window += 1
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
            steps_out.append(step + 1)
            losses.append(window / n_window)
            window, n_window = 0.0, 0

    learned = _unflatten(model, params)
    grids = noise_grids(learned, x_data, Rng(seed).spawn(_FINAL))
    z = grids.pop("posterior_samples")
    final = {
        "tv_to_data": tv_distance(grids["learned_density"], grids["data_density"]),
        "tail_low": float(np.mean(z < -1.0)),
        "tail_high": float(np.mean(z > 1.0)),
        "posterior_mean": float(np.mean(z)),
    }
    result = ExperimentResult(steps=steps_out, series={"loss": losses}, final=final,
                              wall_clock=time.perf_counter() - t0, seed=seed,
                              config=dict(vars(cfg), seed=seed), model=grids)
    return learned, result


def noise_grids(model: NoiseModelParams, x_data, rng: Rng, n_posterior: int = 10_000,
                bounds=(-2.0, 2.0, -2.0, 2.0), resolution=(100, 100)) -> dict:
    """Learned density, data histogram and both posteriors at the ambiguous point."""
    learned = model.log_marginal_grid(bounds, resolution)
    data = density_grid(lambda n: x_data, bounds, resolution, len(x_data))
    posterior = true_posterior_grid(model.decoder, AMBIGUOUS_X)
    z = model.posterior_samples(AMBIGUOUS_X, n_posterior, rng)
    hist, edges = np.histogram(z, bins=120, range=(-6.0, 6.0), density=True)
    approx = Grid1D(0.5 * (edges[:-1] + edges[1:]), hist)
    return {"learned_density": learned, "data_density": data, "true_posterior": posterior,
            "approx_posterior": approx, "posterior_samples": z}
