"""Command-line front end.

    avolab fit-energy --target d --mode avo --T 10 --seed 7 --out runs/d7
    avolab sweep --rho 0,0.2,0.4,0.6,0.8 --trials 10 --out runs/sweep
    avolab fit-noise-model --variant avo --out runs/noise
    avolab render --input runs/sweep/metrics.csv --kind curve --out runs/fig
    avolab eval --checkpoint runs/d7/chain.npz --target d --out runs/d7eval

Every subcommand also accepts ``--config FILE`` holding ``key = value``
lines with the same names as the flags; flags win over the file. The
resolved settings are echoed to ``config.resolved`` in the output directory
and can be fed back through ``--config``.

Exit codes: 0 success, 1 invalid input, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from avolab.chain import ChainError, load_checkpoint, sample_chain, save_checkpoint
from avolab.dist import DiagGaussian, Rng
from avolab.energy import MIXTURE_CENTERS, TOY_KINDS, EnergySpec
from avolab.evaluate import (EvalError, EvalReport, Grid2D, ais_log_z, density_grid, mode_coverage,
                             negative_kl_estimate, read_grid_csv, write_grid_csv, write_pgm)
from avolab.objective import Schedule
from avolab.train import (COVERAGE_RADIUS, DivergenceError, EnergyFitConfig, SweepCell,
                          fit_energy, fit_noise_model, robustness_sweep, write_metrics, write_summary)

log = logging.getLogger("avolab")

GRID_BOUNDS = (-4.0, 4.0, -4.0, 4.0)


class UsageError(Exception):
    pass


def _int(s):
    return int(s)


def _float_list(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def _str_list(s):
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _in(choices):
    def check(v):
        items = v if isinstance(v, list) else [v]
        for item in items:
            if item not in choices:
                return f"must be one of {', '.join(choices)}"
        return None
    return check


def _at_least(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _positive(v):
    return None if v > 0 else "must be > 0"


def _unit(v):
    items = v if isinstance(v, list) else [v]
    return None if all(0.0 <= x <= 1.0 for x in items) else "must lie in [0, 1]"


def _unit_open(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


# name -> (parser, default, check)
_ENERGY_KEYS = {
    "T": (_int, 10, _at_least(1)),
    "steps": (_int, 2000, _at_least(1)),
    "batch": (_int, 64, _at_least(1)),
    "lr": (float, 1e-3, _positive),
    "beta0": (float, 0.01, _unit_open),
    "hidden": (_int, 32, _at_least(1)),
    "checkpoint_every": (_int, 200, _at_least(1)),
    "checkpoint_n": (_int, 256, _at_least(1)),
    "checkpoint_k": (_int, 50, _at_least(1)),
    "eval_n": (_int, 10_000, _at_least(1)),
    "eval_k": (_int, 2000, _at_least(1)),
}

KEYS = {
    "fit-energy": {
        "target": (str, "d", _in(TOY_KINDS)),
        "mode": (str, "avo", _in(("avo", "elbo"))),
        "rho": (float, 0.0, _unit),
        "seed": (_int, 0, _at_least(0)),
        **_ENERGY_KEYS,
        "out": (str, "runs/fit-energy", None),
    },
    "sweep": {
        "targets": (_str_list, ["a", "b", "c", "d", "e", "f"], _in(TOY_KINDS)),
        "modes": (_str_list, ["elbo", "avo"], _in(("avo", "elbo"))),
        "rho": (_float_list, [0.0, 0.2, 0.4, 0.6, 0.8], _unit),
        "trials": (_int, 10, _at_least(1)),
        "seed": (_int, 0, _at_least(0)),
        **_ENERGY_KEYS,
        "eval_n": (_int, 1000, _at_least(1)),
        "eval_k": (_int, 100, _at_least(1)),
        "checkpoint_n": (_int, 128, _at_least(1)),
        "checkpoint_k": (_int, 32, _at_least(1)),
        "workers": (_int, 0, _at_least(0)),
        "out": (str, "runs/sweep", None),
    },
    "fit-noise-model": {
        "variant": (str, "avo", _in(("iwae", "vae", "avo"))),
        "n_data": (_int, 10_000, _at_least(1)),
        "steps": (_int, 5000, _at_least(1)),
        "batch": (_int, 128, _at_least(1)),
        "lr": (float, 1e-3, _positive),
        "K": (_int, 500, _at_least(1)),
        "T": (_int, 10, _at_least(1)),
        "a": (float, 0.5, _unit),
        "hidden": (_int, 32, _at_least(1)),
        "noise_std": (float, 0.1, _positive),
        "seed": (_int, 0, _at_least(0)),
        "out": (str, "runs/noise", None),
    },
    "render": {
        "input": (str, None, None),
        "kind": (str, "grid", _in(("grid", "curve"))),
        "out": (str, "runs/render", None),
    },
    "eval": {
        "checkpoint": (str, None, None),
        "target": (str, "d", _in(TOY_KINDS)),
        "N": (_int, 10_000, _at_least(1)),
        "K": (_int, 2000, _at_least(1)),
        "seed": (_int, 0, _at_least(0)),
        "out": (str, "runs/eval", None),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avolab", description="Annealed variational objectives toolkit",
                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command, keys in KEYS.items():
        p = sub.add_parser(command, allow_abbrev=False)
        p.add_argument("--config", default=None, help="key = value settings file")
        p.add_argument("--verbose", action="store_true")
        for name in keys:
            p.add_argument(_flag(name), dest=name, default=None)
    return parser


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; keys may use - or _."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _format_value(v) -> str:
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve(command: str, flags: dict, file_values: dict) -> dict:
    """Defaults, then file, then flags; every value parsed and range-checked."""
    keys = KEYS[command]
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, (parse, default, check) in keys.items():
        raw = flags.get(name)
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            if default is None:
                raise UsageError(f"{_flag(name)} is required")
            value = default
        else:
            try:
                value = parse(raw)
            except ValueError:
                raise UsageError(f"{name}: cannot parse {raw!r}") from None
        if check is not None:
            problem = check(value)
            if problem:
                raise UsageError(f"{name} {problem} (got {_format_value(value)})")
        cfg[name] = value
    return cfg


def write_resolved(cfg: dict, out: Path) -> None:
    with open(out / "config.resolved", "w") as fh:
        for k, v in cfg.items():
            fh.write(f"{k} = {_format_value(v)}\n")


def _energy_config(cfg: dict, mode: str) -> EnergyFitConfig:
    return EnergyFitConfig(mode=mode, total_steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"],
                           T=cfg["T"], hidden=cfg["hidden"], beta0=cfg["beta0"],
                           checkpoint_every=cfg["checkpoint_every"], checkpoint_n=cfg["checkpoint_n"],
                           checkpoint_k=cfg["checkpoint_k"], eval_n=cfg["eval_n"], eval_k=cfg["eval_k"])


def _save_grid(grid: Grid2D, out: Path, stem: str, title: str = "") -> None:
    from avolab import plots

    write_grid_csv(grid, out / f"{stem}.csv")
    write_pgm(grid, out / f"{stem}.pgm")
    plots.plot_grid(grid, out / f"{stem}.png", title)


def _sample_grid(model, q0, seed: int, n: int = 20_000) -> Grid2D:
    z = sample_chain(model.layers, q0, Rng(seed).spawn(5), n=n).z[-1]
    return density_grid(lambda _: z, GRID_BOUNDS, (100, 100), n)


def cmd_fit_energy(cfg: dict, out: Path) -> None:
    target = EnergySpec(cfg["target"])
    ecfg = _energy_config(cfg, cfg["mode"])
    schedule = Schedule(cfg["T"], cfg["beta0"], cfg["rho"])
    opts = {k: getattr(ecfg, k) for k in ("hidden", "checkpoint_every", "checkpoint_n", "checkpoint_k",
                                          "eval_n", "eval_k")}
    result = fit_energy(target, cfg["mode"], schedule, cfg["steps"], cfg["batch"], cfg["lr"],
                        cfg["T"], cfg["seed"], **opts)
    cell = SweepCell(cfg["target"], cfg["mode"], cfg["rho"], 0, cfg["seed"], result)
    write_metrics(out / "metrics.csv", [cell])
    write_summary(out / "summary.csv", [{
        "target": cfg["target"], "mode": cfg["mode"], "rho": cfg["rho"], "trials": 1, "failed": 0,
        "mean": result.report.unshifted, "std": float("nan")}])
    save_checkpoint(result.model, out / "chain.npz")
    _save_grid(_sample_grid(result.model, DiagGaussian.standard(2), cfg["seed"]), out, "q_density",
               f"q_T, energy {cfg['target']} ({cfg['mode']})")
    _save_grid(density_grid(target, GRID_BOUNDS, (100, 100)), out, "target_density",
               f"energy {cfg['target']}")
    print(f"negative_kl={result.report.negative_kl_estimate:.4f} "
          f"log_z={result.report.log_z_estimate:.4f} unshifted={result.report.unshifted:.4f}")


def curve_rows(summary_rows) -> list:
    return sorted(summary_rows, key=lambda r: (r["target"], r["mode"], r["rho"]))


def write_curves(rows, out: Path) -> None:
    from avolab import plots

    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("target", "mode", "rho", "mean", "std", "trials"))
        for r in rows:
            w.writerow([r["target"], r["mode"], _format_value(r["rho"]), _format_value(r["mean"]),
                        _format_value(r["std"]), r["trials"]])
    plots.plot_sweep_curves(rows, out / "curves.png")


def cmd_sweep(cfg: dict, out: Path) -> None:
    base = _energy_config(cfg, "avo")
    result = robustness_sweep(cfg["targets"], cfg["modes"], cfg["rho"], cfg["trials"], cfg["seed"],
                              base, workers=cfg["workers"] or None)
    write_metrics(out / "metrics.csv", result.cells)
    summary = result.summary()
    write_summary(out / "summary.csv", summary)
    write_curves(curve_rows(summary), out)
    failed = [c for c in result.cells if c.result is None]
    for c in failed:
        log.warning("cell %s/%s rho=%s trial=%d failed: %s", c.target, c.mode, c.rho, c.trial, c.error)
    print(f"{len(result.cells) - len(failed)} of {len(result.cells)} cells finished")


def cmd_fit_noise_model(cfg: dict, out: Path) -> None:
    from avolab import plots

    opts = {k: cfg[k] for k in ("batch", "K", "T", "a", "hidden", "noise_std")}
    model, result = fit_noise_model(cfg["variant"], cfg["n_data"], cfg["steps"], cfg["lr"],
                                    cfg["seed"], **opts)
    cell = SweepCell("noise", cfg["variant"], 0.0, 0, cfg["seed"], result)
    write_metrics(out / "metrics.csv", [cell])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "metric", "value"))
        for k, v in result.final.items():
            w.writerow([cfg["variant"], k, _format_value(float(v))])
    grids = result.model
    _save_grid(grids["learned_density"], out, "learned_density", f"p(x), {cfg['variant']}")
    _save_grid(grids["data_density"], out, "data_density", "data")
    true_post, approx = grids["true_posterior"], grids["approx_posterior"]
    with open(out / "posterior.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("z", "true_posterior"))
        for z, v in zip(true_post.z, true_post.values):
            w.writerow([repr(float(z)), repr(float(v))])
    with open(out / "approx_posterior.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("z", "density"))
        for z, v in zip(approx.z, approx.values):
            w.writerow([repr(float(z)), repr(float(v))])
    plots.plot_posterior(true_post, approx, out / "posterior.png", "x = (0, -1)")
    print(" ".join(f"{k}={v:.4f}" for k, v in result.final.items()))


def read_metrics(path) -> list:
    """Rows of a long-format metrics.csv; errors name the offending line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise UsageError(f"{path}: empty metrics file")
        expected = ["target", "mode", "rho", "trial", "step", "metric", "value"]
        if header != expected:
            raise UsageError(f"{path}:1: unexpected header {','.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 7:
                raise UsageError(f"{path}:{lineno}: expected 7 fields, got {len(rec)}")
            try:
                rows.append({"target": rec[0], "mode": rec[1], "rho": float(rec[2]),
                             "trial": int(rec[3]), "step": int(rec[4]), "metric": rec[5],
                             "value": float(rec[6]) if rec[5] != "error" else rec[6]})
            except ValueError:
                raise UsageError(f"{path}:{lineno}: malformed field") from None
    if not rows:
        raise UsageError(f"{path}: no metric rows")
    return rows


def summarize_metrics(rows, metric: str = "final_negative_kl_unshifted") -> list:
    groups: dict = {}
    for r in rows:
        if r["metric"] == metric:
            groups.setdefault((r["target"], r["mode"], r["rho"]), []).append(r["value"])
    if not groups:
        raise UsageError(f"no {metric!r} rows in metrics file")
    out = []
    for (target, mode, rho), vals in groups.items():
        v = np.array(vals)
        out.append({"target": target, "mode": mode, "rho": rho, "trials": len(v),
                    "mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else float("nan")})
    return curve_rows(out)


def cmd_render(cfg: dict, out: Path) -> None:
    path = Path(cfg["input"])
    if not path.is_file():
        raise UsageError(f"input {path} does not exist")
    if cfg["kind"] == "grid":
        try:
            grid = read_grid_csv(path)
        except EvalError as exc:
            raise UsageError(str(exc)) from None
        _save_grid(grid, out, path.stem)
    else:
        write_curves(summarize_metrics(read_metrics(path)), out)


def cmd_eval(cfg: dict, out: Path) -> None:
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    chain = load_checkpoint(path)
    target = EnergySpec(cfg["target"])
    q0 = DiagGaussian.standard(target.dim)
    rng = Rng(cfg["seed"])
    nkl = negative_kl_estimate(chain, q0, target, cfg["N"], cfg["K"], rng.spawn(2))
    lz = ais_log_z(q0, target, rng=rng.spawn(3))
    cover = ()
    if target.kind == "d":
        z = sample_chain(chain.layers, q0, rng.spawn(4), n=cfg["N"]).z[-1]
        cover = mode_coverage(z, MIXTURE_CENTERS, COVERAGE_RADIUS)
    report = EvalReport(nkl, lz, cover, cfg["N"], cfg["K"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value"))
        w.writerow(("negative_kl", repr(nkl)))
        w.writerow(("log_z", repr(lz)))
        w.writerow(("negative_kl_unshifted", repr(report.unshifted)))
        for j, f in enumerate(cover):
            w.writerow((f"mode_fraction_{j}", repr(f)))
    _save_grid(_sample_grid(chain, q0, cfg["seed"]), out, "q_density")
    print(f"negative_kl={nkl:.4f} log_z={lz:.4f} unshifted={report.unshifted:.4f}")


COMMANDS = {"fit-energy": cmd_fit_energy, "sweep": cmd_sweep, "fit-noise-model": cmd_fit_noise_model,
            "render": cmd_render, "eval": cmd_eval}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve(ns.command, flags, file_values)
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_resolved(cfg, out)
        except OSError as exc:
            raise UsageError(f"cannot write to output directory {out}: {exc}") from None
        COMMANDS[ns.command](cfg, out)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (ValueError, EvalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, ChainError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
