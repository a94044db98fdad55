import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avolab import tape as T
from avolab.dist import DiagGaussian
from avolab.energy import (AnnealedTarget, EnergySpec, StdNet, TOY_KINDS, decoder_mean,
                           interp_log_density, log_density, noise_model_log_joint,
                           sample_noise_data)
from avolab.dist import Rng
from avolab.evaluate import density_grid

from conftest import check_grads

points = arrays(np.float64, (2,), elements=st.floats(-4, 4))


# scalar re-statements of the six toy log-densities, written independently of
# the tape code so the two can be checked against each other
def _lse(*xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def ref_a(z1, z2):
    r = math.hypot(z1, z2)
    return (-0.5 * ((r - 2) / 0.4) ** 2
            + _lse(-0.5 * ((z1 - 2) / 0.6) ** 2, -0.5 * ((z1 + 2) / 0.6) ** 2))


def ref_b(z1, z2):
    r = math.hypot(z1 / 2, z2 / 2)
    return (-0.5 * ((r - 2) / 0.5) ** 2
            + _lse(-0.5 * ((z1 - 2) / 0.6) ** 2, -0.5 * (2 * math.sin(z1)) ** 2,
                   -0.5 * ((z1 + z2 + 2.5) / 0.6) ** 2))


def ref_c(z1, z2):
    return -(2 - math.sqrt(z1 ** 2 + z2 ** 2 / 2)) ** 2


def ref_d(z1, z2):
    w = [0.1, 0.3, 0.4, 0.2]
    c = [(-2, 0), (2, 0), (0, 2), (0, -2)]
    s = 0.2
    return math.log(sum(wk * math.exp(-((z1 - a) ** 2 + (z2 - b) ** 2) / (2 * s * s))
                        / (2 * math.pi * s * s) for wk, (a, b) in zip(w, c)))


def ref_e(z1, z2):
    return -0.5 * ((z2 - math.sin(math.pi * z1 / 2)) / 0.4) ** 2 - 0.1 * z1 ** 2


def ref_f(z1, z2):
    w1 = math.sin(math.pi * z1 / 2)
    w2 = 3 * math.exp(-0.5 * (z1 - 2) ** 2)
    return (_lse(-0.5 * ((z2 - w1) / 0.35) ** 2, -0.5 * ((z2 - w1 + w2) / 0.35) ** 2)
            - 0.05 * z1 ** 2)


REF = dict(a=ref_a, b=ref_b, c=ref_c, d=ref_d, e=ref_e, f=ref_f)


@pytest.mark.parametrize("kind", TOY_KINDS)
@settings(max_examples=40, deadline=None)
@given(z=points)
def test_toy_energy_matches_scalar_formula(kind, z):
    got = float(log_density(EnergySpec(kind), z))
    want = REF[kind](*z)
    assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_kind_c_zero_on_ellipse():
    assert float(log_density(EnergySpec("c"), np.array([2.0, 0.0]))) == 0.0


def test_kind_d_at_top_center():
    # dominated by the weight-0.4 component centred at (0, 2); the others are
    # e^-100 and e^-200 smaller
    expected = math.log(0.4) - math.log(2 * math.pi) - 2 * math.log(0.2)
    assert abs(float(log_density(EnergySpec("d"), np.array([0.0, 2.0]))) - 0.4647080265847001) < 1e-12
    assert abs(expected - 0.4647080265847001) < 1e-15


def test_kind_e_vanishes_at_origin():
    assert float(log_density(EnergySpec("e"), np.zeros(2))) == 0.0


def test_fourmode_alias_and_unknown_kind():
    assert EnergySpec("FourMode").kind == "d"
    with pytest.raises(ValueError):
        EnergySpec("z")
    with pytest.raises(ValueError):
        EnergySpec("gaussian")


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        log_density(EnergySpec("a"), np.zeros(3))


def test_kind_d_is_normalized():
    grid = density_grid(EnergySpec("d"), bounds=(-4, 4, -4, 4), resolution=400)
    cell = (8 / 400) ** 2
    assert abs(grid.values.sum() * cell - 1.0) < 1e-3


def test_batched_evaluation_matches_rows(rng):
    z = rng.normal(size=(7, 2)) * 2
    for kind in TOY_KINDS:
        batch = log_density(EnergySpec(kind), z)
        rows = [float(log_density(EnergySpec(kind), zi)) for zi in z]
        np.testing.assert_allclose(batch, rows, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("kind", TOY_KINDS)
def test_toy_energy_gradients(kind, rng):
    # keep clear of the origin, where the ring energies use a norm
    z = rng.uniform(0.5, 2.5, size=(6, 2)) * rng.choice([-1, 1], size=(6, 2))
    check_grads(lambda x: log_density(EnergySpec(kind), x), [z])


def test_gaussian_energy_with_log_scale():
    spec = EnergySpec.gaussian([0.0, 0.0], [1.0, 1.0], log_scale=math.log(2))
    assert abs(float(log_density(spec, np.zeros(2))) - (math.log(2) - math.log(2 * math.pi))) < 1e-12


# ---------------------------------------------------------------- interpolation


@settings(max_examples=40, deadline=None)
@given(z=points, kind=st.sampled_from(TOY_KINDS))
def test_interp_endpoints_and_midpoint(z, kind):
    f0 = DiagGaussian.standard(2)
    fT = EnergySpec(kind)
    lo = float(f0.log_prob(z))
    hi = float(log_density(fT, z))
    assert float(interp_log_density(AnnealedTarget(f0, fT, 0.0), z)) == lo
    assert float(interp_log_density(AnnealedTarget(f0, fT, 1.0), z)) == hi
    mid = float(interp_log_density(AnnealedTarget(f0, fT, 0.5), z))
    assert abs(mid - 0.5 * (lo + hi)) <= 1e-12 * max(1.0, abs(lo), abs(hi))


@settings(max_examples=40, deadline=None)
@given(z=points, alpha=st.floats(0, 1))
def test_interp_is_affine_in_alpha(z, alpha):
    f0, fT = DiagGaussian.standard(2), EnergySpec("e")
    got = float(interp_log_density(AnnealedTarget(f0, fT, alpha), z))
    want = alpha * float(log_density(fT, z)) + (1 - alpha) * float(f0.log_prob(z))
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        AnnealedTarget(DiagGaussian.standard(2), EnergySpec("a"), 1.5)


# ---------------------------------------------------------------- noise model


def test_noise_joint_with_zero_residual():
    theta = StdNet.constant(0.3)
    s = 0.3
    got = float(noise_model_log_joint(theta, np.array([0.0, 1.0]), np.array([0.0])))
    want = -2 * math.log(s) - math.log(2 * math.pi) - 0.5 * math.log(2 * math.pi)
    assert abs(got - want) < 1e-9


def test_decoder_mean_asymptote():
    np.testing.assert_allclose(decoder_mean(np.array([50.0])), [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(decoder_mean(np.array([-50.0])), [0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(decoder_mean(np.array([0.0])), [0.0, 1.0], atol=1e-15)


def test_noise_joint_gradients(rng):
    theta = StdNet.init(Rng(3), hidden=5)
    x = np.array([0.2, -0.8])
    z = rng.normal(size=(6, 1))

    def f(zz, W1, b1, W2, b2):
        net = StdNet({"W1": W1, "b1": b1, "W2": W2, "b2": b2})
        return noise_model_log_joint(net, x, zz)

    p = theta.params
    check_grads(f, [z, p["W1"], p["b1"], p["W2"], p["b2"]])


def test_noise_data_shapes_and_spread():
    x, z = sample_noise_data(Rng(0), 5000, noise_std=0.1)
    assert x.shape == (5000, 2) and z.shape == (5000, 1)
    resid = x - decoder_mean(z)
    assert abs(resid.std() - 0.1) < 0.005
    # every point sits near the unit circle
    assert np.all(np.abs(np.linalg.norm(x, axis=1) - 1.0) < 0.6)
