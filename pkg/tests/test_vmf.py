import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ive
from scipy.stats import ortho_group

from blab.errors import DimensionMismatch, InsufficientSamples, InvalidArgument
from blab.vmf import (
    KAPPA_MAX,
    VmfModel,
    fit_vmf,
    log_bessel_iv,
    log_sphere_area,
    log_vmf_normalizer,
    overlap_degree,
    overlap_degree_pooled,
    overlap_degree_with_error,
    sample_uniform_sphere,
    sample_vmf,
    vmf_log_density,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def log_c3(kappa):
    """Closed-form log normalizer on the 2-sphere: kappa / (4 pi sinh kappa)."""
    if kappa == 0:
        return -math.log(4 * math.pi)
    # log sinh k = k + log(1 - exp(-2k)) - log 2, stable for large k
    log_sinh = kappa + math.log1p(-math.exp(-2 * kappa)) - math.log(2)
    return math.log(kappa) - math.log(4 * math.pi) - log_sinh


def exact_log_bc_d3(a: VmfModel, b: VmfModel):
    """log of integral sqrt(p_a p_b) = sqrt(C(ka) C(kb)) / C(|ka mu_a + kb mu_b| / 2)."""
    resultant = np.linalg.norm(a.kappa * a.mu + b.kappa * b.mu) / 2
    return 0.5 * (log_c3(a.kappa) + log_c3(b.kappa)) - log_c3(resultant)


@pytest.mark.parametrize("v", [0.0, 0.5, 1.0, 3.0, 11.5, 30.0])
@pytest.mark.parametrize("x", [1e-3, 0.7, 5.0, 49.9, 50.0, 120.0, 700.0])
def test_log_bessel_matches_scipy(v, x):
    reference = math.log(ive(v, x)) + x
    assert log_bessel_iv(v, x) == pytest.approx(reference, rel=1e-9, abs=1e-9)


def test_log_bessel_large_argument_stays_finite():
    # ive underflows nothing here, but exp(x) alone would overflow.
    value = log_bessel_iv(3.0, 1e6)
    reference = math.log(ive(3.0, 1e6)) + 1e6
    assert value == pytest.approx(reference, rel=1e-12)


def test_log_normalizer_d3_closed_form():
    for kappa in (0.5, 2.0, 10.0, 60.0, 1e4):
        assert log_vmf_normalizer(3, kappa) == pytest.approx(log_c3(kappa), abs=1e-9)


def test_density_d3_at_mean():
    mu = unit([1, 2, 2])
    model = VmfModel(mu, 2.0)
    assert vmf_log_density(model, mu) == pytest.approx(log_c3(2.0) + 2.0, abs=1e-9)


def test_density_uniform_at_zero_kappa():
    model = VmfModel(unit([1, 0, 0, 0]), 0.0)
    ys = sample_uniform_sphere(5, 4, np.random.default_rng(0))
    np.testing.assert_allclose(vmf_log_density(model, ys), -log_sphere_area(4), rtol=1e-14)
    assert log_sphere_area(3) == pytest.approx(math.log(4 * math.pi))


def test_density_antipodal_difference():
    mu = unit([1, -1, 0, 2])
    model = VmfModel(mu, 5.0)
    assert vmf_log_density(model, mu) - vmf_log_density(model, -mu) == pytest.approx(10.0, abs=1e-12)


def test_density_rejects_non_unit():
    with pytest.raises(InvalidArgument):
        vmf_log_density(VmfModel(unit([1, 0]), 1.0), np.array([2.0, 0.0]))
    with pytest.raises(DimensionMismatch):
        vmf_log_density(VmfModel(unit([1, 0]), 1.0), unit([1, 0, 0]))


def test_model_invariants():
    with pytest.raises(InvalidArgument):
        VmfModel(np.array([1.0, 1.0]), 1.0)
    with pytest.raises(InvalidArgument):
        VmfModel(unit([1, 0]), -1.0)
    with pytest.raises(InvalidArgument):
        VmfModel(unit([1, 0]), 2 * KAPPA_MAX)


@pytest.mark.parametrize("kappa", [0.0, 1.0, 4.0, 10.0])
def test_density_integrates_to_one_d3(kappa):
    rng = np.random.default_rng(int(kappa))
    ys = sample_uniform_sphere(1_000_000, 3, rng)
    model = VmfModel(unit([0.3, -0.4, 0.8]), kappa)
    integral = np.exp(vmf_log_density(model, ys)).mean() * 4 * math.pi
    assert integral == pytest.approx(1.0, rel=0.02)


def test_fit_identical_samples_caps_kappa():
    e1 = np.eye(5)[0]
    model = fit_vmf(np.tile(e1, (10, 1)))
    np.testing.assert_array_equal(model.mu, e1)
    assert model.kappa == KAPPA_MAX


def test_fit_uniform_gives_small_kappa():
    ys = sample_uniform_sphere(5000, 8, np.random.default_rng(1))
    assert fit_vmf(ys).kappa < 0.5


def test_fit_recovers_parameters():
    truth = VmfModel(unit(np.arange(1, 9)), 20.0)
    fitted = fit_vmf(sample_vmf(truth, 5000, np.random.default_rng(2)))
    assert fitted.mu @ truth.mu > 0.99
    assert abs(fitted.kappa - 20) / 20 < 0.15


def test_fit_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        fit_vmf(unit([1, 0, 0])[None, :])


def test_fit_zero_resultant():
    ys = np.array([[1.0, 0.0], [-1.0, 0.0]])
    model = fit_vmf(ys)
    assert model.kappa == 0.0
    np.testing.assert_array_equal(model.mu, ys[0])


@given(st.integers(0, 10_000))
def test_fit_is_rotation_equivariant(seed):
    rng = np.random.default_rng(seed)
    ys = sample_vmf(VmfModel(unit(rng.normal(size=5)), 6.0), 200, rng)
    Q = ortho_group.rvs(5, random_state=seed)
    base = fit_vmf(ys)
    rotated = fit_vmf(ys @ Q.T)
    np.testing.assert_allclose(rotated.mu, Q @ base.mu, atol=1e-9)
    assert rotated.kappa == pytest.approx(base.kappa, abs=1e-9)


def test_sampler_mean_resultant_matches_theory():
    # E[mu . y] = A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)
    kappa, d = 7.0, 6
    model = VmfModel(unit(np.ones(d)), kappa)
    ys = sample_vmf(model, 50_000, np.random.default_rng(3))
    expected = ive(d / 2, kappa) / ive(d / 2 - 1, kappa)
    assert (ys @ model.mu).mean() == pytest.approx(expected, abs=5e-3)
    np.testing.assert_allclose(np.linalg.norm(ys, axis=1), 1.0, atol=1e-12)


def test_overlap_of_identical_models_is_zero():
    model = VmfModel(unit([1, 2, 3, 4, 5, 6, 7, 8]), 15.0)
    assert -0.05 <= overlap_degree(model, model, 20000, seed=1) <= 0.05


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_overlap_is_exactly_symmetric(seed, ka, kb):
    rng = np.random.default_rng(seed)
    a = VmfModel(unit(rng.normal(size=4)), ka)
    b = VmfModel(unit(rng.normal(size=4)), kb)
    assert overlap_degree(a, b, 1000, seed) == overlap_degree(b, a, 1000, seed)


def test_overlap_requires_enough_samples_and_matching_dims():
    a = VmfModel(unit([1, 0, 0]), 1.0)
    with pytest.raises(InvalidArgument):
        overlap_degree(a, a, 999)
    with pytest.raises(DimensionMismatch):
        overlap_degree(a, VmfModel(unit([1, 0]), 1.0))


@pytest.mark.parametrize("degrees", [0, 45, 90, 135, 180])
def test_overlap_matches_d3_closed_form(degrees):
    theta = math.radians(degrees)
    a = VmfModel(np.array([1.0, 0.0, 0.0]), 10.0)
    b = VmfModel(np.array([math.cos(theta), math.sin(theta), 0.0]), 10.0)
    est, se = overlap_degree_with_error(a, b, 20000, seed=degrees)
    assert abs(est - exact_log_bc_d3(a, b)) <= 3 * se + 1e-12


def test_overlap_decreases_with_angle():
    a = VmfModel(np.array([1.0, 0.0, 0.0]), 10.0)
    estimates = []
    for degrees in (0, 45, 90, 135, 180):
        theta = math.radians(degrees)
        b = VmfModel(np.array([math.cos(theta), math.sin(theta), 0.0]), 10.0)
        estimates.append(overlap_degree(a, b, 20000, seed=0))
    assert all(x > y for x, y in zip(estimates, estimates[1:]))


def test_unequal_kappa_closed_form():
    a = VmfModel(unit([1, 1, 0]), 3.0)
    b = VmfModel(unit([0, 1, 1]), 12.0)
    est, se = overlap_degree_with_error(a, b, 40000, seed=5)
    assert abs(est - exact_log_bc_d3(a, b)) <= 3 * se


def test_pooled_estimator_targets_a_different_integral():
    # Averaging sqrt(p_a p_b) over draws from the densities themselves estimates
    # the integral of p^2 when a = b, not the Bhattacharyya coefficient (log 1 = 0).
    a = VmfModel(np.array([1.0, 0.0, 0.0]), 10.0)
    points = sample_vmf(a, 20000, np.random.default_rng(0))
    pooled = overlap_degree_pooled(a, a, points)
    assert pooled == pytest.approx(2 * log_c3(10.0) - log_c3(20.0), abs=0.02)
    assert abs(pooled) > 0.1


def test_tiny_kappa_normalizer_tends_to_uniform():
    assert log_vmf_normalizer(8, 5e-324) == pytest.approx(-log_sphere_area(8), abs=1e-12)
