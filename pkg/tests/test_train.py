import csv
import math

import numpy as np
import pytest

from avolab.chain import sample_chain
from avolab.dist import DiagGaussian, Rng
from avolab.energy import EnergySpec
from avolab.objective import Schedule
from avolab.optim import AdamState, adam_step
from avolab import train
from avolab.train import (DivergenceError, EnergyFitConfig, ExperimentResult, NoiseFitConfig,
                          SweepCell, fit_energy, fit_energy_ensemble, robustness_sweep, sweep_cells,
                          write_metrics, write_summary)

# tiny evaluation budget for checks that only look at the plumbing
TINY = dict(checkpoint_every=10, checkpoint_n=16, checkpoint_k=4, eval_n=32, eval_k=4,
            ais_steps=20, ais_chains=16)


# ---------------------------------------------------------------- Adam


def test_adam_first_step():
    st = AdamState(lr=0.001)
    out = adam_step({"x": np.array(2.0)}, {"x": np.array(1.0)}, st)
    # bias correction turns m, v into g, g^2: the step is lr * g / (|g| + eps)
    assert float(out["x"]) == pytest.approx(2.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)
    assert st.step == 1


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_minimizes_a_quadratic():
    st = AdamState(lr=0.05)
    p = {"x": np.array(5.0)}
    for _ in range(2000):
        p = adam_step(p, {"x": 2 * p["x"]}, st)
    assert abs(float(p["x"])) < 0.01


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, AdamState())


# ---------------------------------------------------------------- configs


def test_energy_config_validation():
    with pytest.raises(ValueError):
        EnergyFitConfig(mode="iwae")
    with pytest.raises(ValueError, match="T must be >= 1"):
        EnergyFitConfig(T=0)
    with pytest.raises(ValueError):
        EnergyFitConfig(lr=0.0)
    with pytest.raises(ValueError):
        NoiseFitConfig(variant="flow")


def test_schedule_must_match_depth():
    with pytest.raises(ValueError):
        fit_energy(EnergySpec("a"), schedule=Schedule(5), T=10)


def test_rho_checked():
    with pytest.raises(ValueError):
        fit_energy_ensemble(EnergySpec("a"), EnergyFitConfig(), [1.5], [0])


# ---------------------------------------------------------------- energy fits


def test_fit_energy_records_series_and_final_metrics():
    res = fit_energy(EnergySpec("d"), "avo", Schedule(2, rho=0.5), total_steps=30, T=2, seed=3,
                     **TINY)
    assert res.steps == [10, 20, 30]
    assert set(res.series) == {"loss", "beta", "negative_kl"}
    assert res.series["beta"][0] < 1.0 and res.series["beta"][-1] == 1.0
    for key in ("final_negative_kl", "log_z", "final_negative_kl_unshifted",
                "mode_fraction_0", "mode_fraction_3"):
        assert key in res.final
    assert res.final["final_negative_kl_unshifted"] == pytest.approx(
        res.final["final_negative_kl"] - res.final["log_z"], abs=1e-12)
    assert res.model.config.T == 2


def test_fit_energy_is_deterministic():
    a = fit_energy(EnergySpec("b"), "elbo", total_steps=20, T=2, seed=5, **TINY)
    b = fit_energy(EnergySpec("b"), "elbo", total_steps=20, T=2, seed=5, **TINY)
    assert list(a.metric_rows()) == list(b.metric_rows())
    c = fit_energy(EnergySpec("b"), "elbo", total_steps=20, T=2, seed=6, **TINY)
    assert list(a.metric_rows()) != list(c.metric_rows())


def test_ensemble_members_equal_solo_runs():
    cfg = EnergyFitConfig(mode="avo", total_steps=20, T=2, **TINY)
    group = fit_energy_ensemble(EnergySpec("e"), cfg, [0.0, 0.6], [11, 12])
    for res, rho, seed in zip(group, [0.0, 0.6], [11, 12]):
        solo = fit_energy_ensemble(EnergySpec("e"), cfg, [rho], [seed])[0]
        assert list(res.metric_rows()) == list(solo.metric_rows())


def test_divergence_is_reported_with_its_step():
    spike = EnergySpec.gaussian([0.0, 0.0], [1e-300, 1e-300])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as info:
            fit_energy(spike, "elbo", total_steps=10, T=2, **TINY)
    assert info.value.step == 0


@pytest.mark.parametrize("mode", ["elbo", "avo"])
def test_gaussian_target_is_fit_almost_exactly(mode):
    target = EnergySpec.gaussian([0.0, 0.0], [1.0, 1.0])
    res = fit_energy(target, mode, total_steps=2000, T=10, seed=0, eval_n=2000, eval_k=200)
    assert res.report.unshifted >= -0.1


def test_identical_annealed_targets_give_identity_like_layers():
    target = EnergySpec.gaussian([0.0], [1.0])
    res = fit_energy(target, "avo", total_steps=500, T=2, seed=1, **TINY)
    trace = sample_chain(res.model.layers, DiagGaussian.standard(1), Rng(99), n=20_000)
    for z in trace.z[1:]:
        assert abs(z.mean()) <= 0.1
        assert abs(z.std() - 1.0) <= 0.1


# ---------------------------------------------------------------- sweep


def test_sweep_cells_order_and_seeds():
    cells = sweep_cells(["a", "b"], ["elbo", "avo"], [0.0, 0.5], 3, 100)
    assert len(cells) == 24
    assert [c.seed for c in cells] == list(range(100, 124))
    assert (cells[0].target, cells[0].mode, cells[0].rho, cells[0].trial) == ("a", "elbo", 0.0, 0)
    assert (cells[-1].target, cells[-1].mode, cells[-1].rho, cells[-1].trial) == ("b", "avo", 0.5, 2)


def test_sweep_without_warmup_matches_plain_fits():
    cfg = EnergyFitConfig(total_steps=20, T=2, **TINY)
    sw = robustness_sweep(["c"], ["elbo"], [0.0], trials=2, seed_base=40, config=cfg, workers=1)
    for cell in sw.cells:
        solo = fit_energy(EnergySpec("c"), "elbo", total_steps=20, T=2, seed=cell.seed, **TINY)
        assert cell.result.report.negative_kl_estimate == solo.report.negative_kl_estimate
        assert list(cell.result.series["loss"]) == list(solo.series["loss"])


def test_failed_cell_is_recorded_and_sweep_continues(monkeypatch):
    real = train._fit_energy_group

    def flaky(target, cfg, rhos, seeds, log_z=None):
        if 1 in seeds:
            raise DivergenceError(3, "injected")
        return real(target, cfg, rhos, seeds, log_z)

    monkeypatch.setattr(train, "_fit_energy_group", flaky)
    cfg = EnergyFitConfig(total_steps=10, T=2, **TINY)
    sw = robustness_sweep(["a"], ["avo"], [0.0], trials=3, seed_base=0, config=cfg, workers=1)
    assert [c.result is None for c in sw.cells] == [False, True, False]
    assert "injected" in sw.cells[1].error
    row = sw.summary()[0]
    assert row["trials"] == 3 and row["failed"] == 1 and math.isfinite(row["mean"])


def test_sweep_rejects_bad_rho():
    with pytest.raises(ValueError):
        robustness_sweep(["a"], ["avo"], [1.2], trials=1)


def test_metrics_file_layout(tmp_path):
    res = ExperimentResult(steps=[1, 2], series={"loss": [0.5, 0.25]}, final={"x": 1.0})
    cells = [SweepCell("a", "avo", 0.2, 0, 7, res), SweepCell("a", "avo", 0.2, 1, 8, None, "boom")]
    n = write_metrics(tmp_path / "m.csv", cells)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["target", "mode", "rho", "trial", "step", "metric", "value"]
    assert n == len(rows) - 1 == 4
    assert rows[1] == ["a", "avo", "0.2", "0", "1", "loss", "0.5"]
    assert rows[-1][-2:] == ["error", "boom"]
    write_summary(tmp_path / "s.csv", [{"target": "a", "mode": "avo", "rho": 0.2, "trials": 2,
                                        "failed": 1, "mean": 0.5, "std": float("nan")}])
    assert open(tmp_path / "s.csv").read().splitlines()[1] == "a,avo,0.2,2,1,0.5,nan"


def test_metric_rows_checks_series_length():
    res = ExperimentResult(steps=[1, 2], series={"loss": [0.5]})
    with pytest.raises(ValueError):
        list(res.metric_rows())


# ---------------------------------------------------------------- noise model


@pytest.mark.parametrize("variant", ["iwae", "vae", "avo"])
def test_noise_model_smoke(variant):
    model, res = train.fit_noise_model(variant, n_data=500, steps=6, seed=2, batch=16, K=8, T=2,
                                       hidden=4, checkpoint_every=3)
    assert res.steps == [3, 6]
    assert set(res.final) == {"tv_to_data", "tail_low", "tail_high", "posterior_mean"}
    assert 0.0 <= res.final["tv_to_data"] <= 1.0
    assert res.model["learned_density"].values.shape == (100, 100)
    assert model.posterior_samples((0.0, -1.0), 50, Rng(0)).shape == (50,)


def test_noise_model_is_deterministic():
    kw = dict(n_data=300, steps=5, seed=4, batch=8, K=4, T=2, hidden=4, checkpoint_every=5)
    _, a = train.fit_noise_model("avo", **kw)
    _, b = train.fit_noise_model("avo", **kw)
    assert a.series == b.series and a.final == b.final
