from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import legendre
from scipy import integrate

from trimeasure import DetectorParams, DomainError, identical_detectors_from_eta
from trimeasure.analytics import (
    correlator_theory,
    fp_solve,
    legendre_coefficients,
    legendre_order,
    mean_purity,
    mean_radius,
    naive_purity_ode,
    purity_diffusion,
    purity_drift,
    single_axis_drift,
    sphere_bin_probabilities,
    sphere_diffusion_pdf,
    stationary_bin_probabilities,
    stationary_mean_purity,
    stationary_mean_radius,
    stationary_purity_pdf,
    stationary_root,
    theta_second_moment,
    variance_V,
)

# stationary law ----------------------------------------------------------


@pytest.mark.parametrize("eta", [0.1, 0.5, 0.9])
def test_stationary_law_normalized(eta):
    head = integrate.quad(lambda p: stationary_purity_pdf(p, eta), 0, 0.9, epsabs=1e-12, limit=200)[0]
    tail = integrate.quad(lambda p: stationary_purity_pdf(p, eta), 0.9, 1 - 1e-15, epsabs=1e-12, limit=400)[0]
    assert head + tail == pytest.approx(1.0, abs=1e-6)
    assert stationary_bin_probabilities(np.linspace(0, 1, 11), eta).sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("eta,expected", [(0.5, 0.732), (0.1, 0.348)])
def test_stationary_mean_radius(eta, expected):
    assert stationary_mean_radius(eta) == pytest.approx(expected, abs=0.002)


def test_stationary_law_shape():
    P = np.array([0.0, 0.3, 0.6])
    eta = 0.5
    raw = np.sqrt(P) / (1 - P) ** 3 * np.exp(-P * (1 - eta) / ((1 - P) * eta))
    dens = stationary_purity_pdf(P, eta)
    assert dens[0] == 0.0
    assert dens[1] / dens[2] == pytest.approx(raw[1] / raw[2], rel=1e-12)


def test_stationary_law_domain():
    with pytest.raises(DomainError):
        stationary_purity_pdf(0.5, 1.0)
    with pytest.raises(DomainError):
        stationary_purity_pdf(1.0, 0.5)
    assert stationary_mean_radius(1.0) == 1.0


def test_stationary_mean_purity_exceeds_root():
    for eta in (0.3, 0.5):
        assert stationary_mean_purity(eta) > stationary_root(eta)


# purification rates ------------------------------------------------------


def test_drift_examples():
    assert purity_drift(1.0, 1.0) == 0.0
    assert stationary_root(1.0) == pytest.approx(1.0)
    assert purity_drift(0.0, 1.0) == pytest.approx(3.0)
    assert stationary_root(0.5) == pytest.approx(3 - math.sqrt(6), abs=1e-12)


@given(st.floats(0, 1))
def test_ideal_drift_factorizes(P):
    assert purity_drift(P, 1.0) == pytest.approx((1 - P) * (3 - P), abs=1e-12)


@given(st.floats(0.02, 1.0))
def test_root_is_a_zero(eta):
    root = stationary_root(eta)
    assert 0 <= root <= 1
    assert purity_drift(root, eta) == pytest.approx(0.0, abs=1e-9)


def test_diffusion_coefficient():
    assert purity_diffusion(0.25) == pytest.approx(8 * 0.5 * 0.25 * 0.75**2)
    assert purity_diffusion(0.0) == 0.0 and purity_diffusion(1.0) == 0.0


def test_single_detector_rate_is_a_third_at_half_purity():
    assert purity_drift(0.5, 1.0) / single_axis_drift(0.5) == pytest.approx(3.0)


def test_naive_ode_examples():
    t = np.linspace(0, 40, 81)
    ideal = naive_purity_ode(1.0, 0.0, t)
    # closed form of dP/dt = (1 − P)(3 − P) from 0
    exact = 3 * (1 - np.exp(-2 * t)) / (3 - np.exp(-2 * t))
    assert ideal == pytest.approx(exact, abs=1e-6)
    assert ideal[-1] == pytest.approx(1.0, abs=1e-8)
    assert np.all(naive_purity_ode(1.0, 1.0, t) == pytest.approx(1.0))
    assert naive_purity_ode(0.5, 0.0, t)[-1] == pytest.approx(3 - math.sqrt(6), abs=1e-6)


# Fokker–Planck -----------------------------------------------------------


@pytest.fixture(scope="module")
def fp_half():
    return fp_solve(0.5, 0.0, [0.0, 0.5, 2.0, 20.0])


def test_fp_conserves_mass(fp_half):
    for grid in fp_half:
        assert np.all(grid.density >= 0)
        assert grid.mass == pytest.approx(1.0, abs=1e-6)
        trap = np.trapezoid(grid.density, grid.nodes)
        assert trap == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("eta", [0.1, 0.3, 0.5, 0.9])
def test_fp_reaches_stationary_law(eta):
    grid = fp_solve(eta, 0.0, [20.0])[0]
    interior = (grid.nodes >= 0.01) & (grid.nodes <= 0.99)
    gap = np.max(np.abs(grid.density[interior] - stationary_purity_pdf(grid.nodes[interior], eta)))
    assert gap <= 1e-3


def test_fp_stationary_mean_beats_root(fp_half):
    assert mean_purity(fp_half[-1]) > stationary_root(0.5)
    assert mean_purity(fp_half[-1]) == pytest.approx(stationary_mean_purity(0.5), abs=1e-4)
    assert mean_radius(fp_half[-1]) == pytest.approx(stationary_mean_radius(0.5), abs=1e-4)


def test_fp_initial_condition_mean():
    grid = fp_solve(0.5, 0.3, [0.0])[0]
    assert mean_purity(grid) == pytest.approx(0.3, abs=1e-9)


def test_fp_grid_refinement():
    t = [0.5, 2.0, 5.0]
    means = {n: np.array([mean_purity(g) for g in fp_solve(0.5, 0.0, t, n_nodes=n)]) for n in (1001, 2001, 4001)}
    assert np.max(np.abs(means[2001] - means[4001])) < 1e-4
    assert np.max(np.abs(means[1001] - means[2001])) < 1e-4


def test_fp_short_time_follows_drift():
    # ⟨P⟩ grows at the mean drift rate from a sharp start
    t = 1e-3
    grid = fp_solve(0.5, 0.4, [t], dt_max=1e-5)[0]
    assert (mean_purity(grid) - 0.4) / t == pytest.approx(purity_drift(0.4, 0.5), rel=0.02)


def test_fp_validation():
    with pytest.raises(DomainError):
        fp_solve(0.5, 0.0, [1.0, 0.5])
    with pytest.raises(DomainError):
        fp_solve(0.5, 1.0, [1.0])
    with pytest.raises(DomainError):
        fp_solve(0.0, 0.0, [1.0])


# sphere diffusion --------------------------------------------------------


@pytest.mark.parametrize("tau", [1e-5, 0.01, 0.1, 1.0, 5.0])
def test_sphere_density_normalized(tau):
    f = lambda th: sphere_diffusion_pdf(th, tau) * 2 * math.pi * math.sin(th)
    peak = min(math.pi, 10 * math.sqrt(variance_V(tau)))
    total = integrate.quad(f, 0, peak, limit=400, epsabs=1e-12)[0]
    if peak < math.pi:
        total += integrate.quad(f, peak, math.pi, limit=400, epsabs=1e-12)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


def test_sphere_density_becomes_uniform():
    theta = np.linspace(0, math.pi, 13)
    assert sphere_diffusion_pdf(theta, 40.0) == pytest.approx(np.full(13, 1 / (4 * math.pi)), abs=1e-12)


def test_theta_second_moment_small_v():
    tau = 0.04 / variance_V(1.0)
    assert theta_second_moment(tau) == pytest.approx(0.04, rel=0.02)


def test_variance_and_truncation():
    assert variance_V(0.25) == pytest.approx(0.5)
    assert legendre_order(1e-3) > legendre_order(1.0)
    assert legendre_order(1e-9) == 10_000
    with pytest.raises(DomainError):
        legendre_order(0.0)


def test_sphere_delta_branch():
    assert sphere_diffusion_pdf(0.0, 0.0) == np.inf
    assert sphere_diffusion_pdf(0.3, 0.0) == 0.0


def test_sphere_semigroup():
    t1, t2 = 0.05, 0.2
    coef1 = legendre_coefficients(t1)
    # project p(·; t1) onto P_n by quadrature, then damp each mode by t2
    nodes, wts = legendre.leggauss(400)
    vals = legendre.legval(nodes, coef1)
    n = np.arange(coef1.size)
    proj = np.array([np.sum(wts * vals * legendre.Legendre.basis(k)(nodes)) for k in n]) * (2 * n + 1) / 2
    evolved = proj * np.exp(-n * (n + 1) * variance_V(t2) / 4)
    theta = np.linspace(0, math.pi, 31)
    direct = sphere_diffusion_pdf(theta, t1 + t2)
    assert legendre.legval(np.cos(theta), evolved) == pytest.approx(direct, abs=1e-6)


def test_sphere_bin_probabilities():
    edges = np.linspace(-1, 1, 21)
    for tau in (0.05, 1.0):
        probs = sphere_bin_probabilities(edges, tau)
        assert probs.sum() == pytest.approx(1.0, abs=1e-10)
        lo, hi = math.acos(edges[15]), math.acos(edges[14])
        direct = integrate.quad(lambda th: sphere_diffusion_pdf(th, tau) * 2 * math.pi * math.sin(th), lo, hi)[0]
        assert probs[14] == pytest.approx(direct, abs=1e-9)


# correlators -------------------------------------------------------------


def test_correlator_examples():
    assert correlator_theory(0.0) == pytest.approx(1.0)
    assert correlator_theory(1.0, eta=1.0) == pytest.approx(math.exp(-1), abs=1e-5)
    assert correlator_theory(0.7, eta=0.5) == pytest.approx(math.exp(-1.4))
    assert correlator_theory(np.array([0.0, 1.0, 3.0]), signal_axis="z", state_axis="x") == pytest.approx([0, 0, 0])


def test_correlator_general_params():
    params = DetectorParams((2.0, 2.0, 1.0), (2.0, 2.0, 2.0), (0.1, 0.2, 0.3))
    rate = params.total_dephasing[0] + params.total_dephasing[1]
    assert correlator_theory(0.5, params=params) == pytest.approx(0.5 * math.exp(-rate * 0.5))
    with pytest.raises(DomainError):
        correlator_theory(-0.1)


def test_identical_correlator_rate_is_inverse_eta():
    params = identical_detectors_from_eta(0.25)
    assert correlator_theory(0.3, params=params) == pytest.approx(math.exp(-0.3 / 0.25))
