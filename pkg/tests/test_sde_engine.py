from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from trimeasure import (
    ConfigError,
    DetectorParams,
    DomainError,
    MeasurementRecord,
    QubitState,
    SimulationConfig,
    identical_detectors_from_eta,
    single_z_detector,
)
from trimeasure.analytics import stationary_bin_probabilities
from trimeasure.noise import noise_block, noise_generator, stream_key
from trimeasure.sde_engine import (
    NoiseIncrement,
    bin_record,
    replay_filter,
    run_ensemble,
    sample_noise,
    sample_radial,
    simulate_arrays,
    simulate_radial,
    simulate_trajectory,
    step_bayes,
    step_ito,
    step_ito_identical,
    step_radial,
    step_stratonovich_general,
)


def _cfg(eta=1.0, start=(0.0, 0.0, 1.0), total=1.0, dt=1e-3, seed=3, scheme="bayes", n=1, params=None):
    return SimulationConfig(
        params or identical_detectors_from_eta(eta), QubitState(start), total, dt, seed, scheme, n
    )


# noise -------------------------------------------------------------------


def test_noise_variance_and_independence(ideal):
    dw = noise_block(noise_generator(11, 0), 1_000_000, ideal, 1e-3)
    var = dw.var(axis=0)
    assert np.all(np.abs(var - 1e-3) < 3e-6)
    cov = np.mean(dw[:, 0] * dw[:, 1])
    assert abs(cov) < 3e-6


def test_noise_off_detector_is_exactly_zero():
    params = DetectorParams((0.0, 2.0, 2.0), (0.0, 2.0, 2.0), (0.0, 0.0, 0.0))
    gen = noise_generator(0, 0)
    for _ in range(100):
        assert sample_noise(gen, params, 1e-3).dw[0] == 0.0


def test_sample_noise_advances_generator(ideal):
    gen = noise_generator(5, 1)
    a = sample_noise(gen, ideal, 1e-3)
    b = sample_noise(gen, ideal, 1e-3)
    assert a != b
    with pytest.raises(DomainError):
        sample_noise(gen, ideal, 0.0)


def test_noise_stream_does_not_depend_on_chunking(ideal):
    whole = noise_block(noise_generator(9, 4, 2), 1000, ideal, 1e-3)
    gen = noise_generator(9, 4, 2)
    parts = np.vstack([noise_block(gen, 300, ideal, 1e-3), noise_block(gen, 700, ideal, 1e-3)])
    assert np.array_equal(whole, parts)


def test_stream_keys_distinct():
    keys = {tuple(stream_key(1, j, p)) for j in range(20) for p in range(5)}
    assert len(keys) == 100
    with pytest.raises(ConfigError):
        stream_key(-1, 0)
    with pytest.raises(ConfigError):
        stream_key(0, 2**32)


# single steps ------------------------------------------------------------


def test_ito_zero_noise_is_pure_decay(ideal):
    out = step_ito_identical(QubitState((1.0, 0.0, 0.0)), NoiseIncrement((0.0, 0.0, 0.0)), ideal, 1e-3)
    assert out.as_array() == pytest.approx([1.0 - 2 * 0.5 * 1e-3, 0.0, 0.0], abs=1e-12)


@given(st.tuples(*[st.floats(-0.1, 0.1)] * 3))
def test_ito_at_center_is_isotropic_kick(dw):
    params = identical_detectors_from_eta(0.7)
    out = step_ito_identical(QubitState((0.0, 0.0, 0.0)), NoiseIncrement(dw), params, 1e-3)
    assert out.as_array() == pytest.approx(np.array(dw) * params.coupling[0], abs=1e-15)


def test_ito_identical_requires_identical_detectors():
    with pytest.raises(DomainError):
        step_ito_identical(QubitState((0, 0, 0)), NoiseIncrement((0, 0, 0)), single_z_detector(), 1e-3)


def test_ito_general_matches_identical_form():
    params = identical_detectors_from_eta(0.4)
    state = QubitState((0.3, -0.2, 0.5))
    noise = NoiseIncrement((0.01, -0.02, 0.005))
    a = step_ito(state, noise, params, 1e-3).as_array()
    b = step_ito_identical(state, noise, params, 1e-3).as_array()
    r = state.as_array()
    dw = noise.as_array()
    # vector form: −2Γ r dt + a{dw(1 − r²) − r × (r × dw)}
    expected = r - 2 * float(params.total_dephasing[0]) * r * 1e-3 + dw * (1 - r @ r) - np.cross(r, np.cross(r, dw))
    assert a == pytest.approx(b)
    assert a == pytest.approx(expected, abs=1e-14)


def test_stratonovich_noiseless_eigenstate_fixed_point(ideal):
    dt = 1e-3
    out = step_stratonovich_general(QubitState((0, 0, 1)), (0.0, 0.0, 1.0 * dt), ideal, dt)
    assert out.as_array() == pytest.approx([0, 0, 1], abs=dt**2)


def test_stratonovich_equation_components():
    params = DetectorParams((2.0, 1.0, 3.0), (2.0, 4.0, 1.5), (0.1, 0.2, 0.3))
    r = np.array([0.2, -0.4, 0.3])
    u = np.array([0.7, -0.1, 0.4])
    dt = 1e-6
    out = step_stratonovich_general(QubitState.from_array(r), u * dt, params, dt).as_array()
    a = params.coupling
    g = np.asarray(params.gamma_k)
    x, y, z = r
    xdot = (1 - x * x) * a[0] * u[0] - x * y * a[1] * u[1] - x * z * a[2] * u[2] - (g[1] + g[2]) * x
    ydot = (1 - y * y) * a[1] * u[1] - y * z * a[2] * u[2] - y * x * a[0] * u[0] - (g[2] + g[0]) * y
    zdot = (1 - z * z) * a[2] * u[2] - z * x * a[0] * u[0] - z * y * a[1] * u[1] - (g[0] + g[1]) * z
    assert (out - r) / dt == pytest.approx([xdot, ydot, zdot], rel=1e-5)


def test_bayes_step_keeps_purity_exactly(ideal, rng):
    state = QubitState((0.0, 0.6, 0.8))
    for _ in range(1000):
        w = 0.5 * state.as_array() * 2 * 1e-3 + rng.standard_normal(3) * math.sqrt(1e-3)
        state = step_bayes(state, w, ideal, 1e-3)
    assert state.radius == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("eta", [1.0, 0.3])
def test_radial_r_one_is_absorbing_only_at_eta_one(eta):
    params = identical_detectors_from_eta(eta)
    out = step_radial(1.0, 0.05, params, 1e-3)
    if eta == 1.0:
        assert out == 1.0
    else:
        assert out < 1.0


def test_radial_drift_arithmetic(ideal):
    assert step_radial(0.5, 0.0, ideal, 1e-3) == pytest.approx(0.5015, abs=1e-15)


@pytest.mark.parametrize("r", [0.0, -0.1, 1.2])
def test_radial_domain(r, ideal):
    with pytest.raises(DomainError):
        step_radial(r, 0.0, ideal, 1e-3)


# trajectories ------------------------------------------------------------


def test_simulation_is_bit_reproducible():
    cfg = _cfg(eta=0.5, total=2.0)
    t1, r1 = simulate_trajectory(cfg, 5)
    t2, r2 = simulate_trajectory(cfg, 5)
    assert np.array_equal(t1.states, t2.states)
    assert np.array_equal(r1.samples, r2.samples)
    t3, _ = simulate_trajectory(cfg, 6)
    assert not np.array_equal(t1.states, t3.states)


def test_record_uses_pre_step_state():
    cfg = _cfg(eta=0.5, total=0.5)
    states, record, dw = simulate_arrays(cfg, 0, return_noise=True)
    assert np.allclose(record, 1.0 * states[:-1] * cfg.dt + dw, atol=1e-16, rtol=0)
    traj, rec = simulate_trajectory(cfg)
    assert traj.times[1] - traj.times[0] == pytest.approx(cfg.dt)
    assert len(traj) == rec.n_steps + 1


@pytest.mark.parametrize("scheme", ["bayes", "stratonovich_heun", "ito"])
def test_filter_replay_reproduces_truth(scheme):
    cfg = _cfg(eta=0.6, total=1.0, dt=1e-4, scheme=scheme)
    traj, record = simulate_trajectory(cfg)
    replay = replay_filter(record, cfg.initial_state, cfg.params, scheme)
    assert np.max(np.abs(replay - traj.states)) <= 1e-6


def test_filter_synchronizes_from_wrong_start():
    cfg = _cfg(eta=1.0, total=10.0, dt=1e-3, n=1000, seed=17)
    wrong = QubitState((0.0, 0.0, -1.0))

    def final_overlap(states, record, dw, j):
        est = replay_filter(MeasurementRecord(cfg.dt, record), wrong, cfg.params)
        return float(est[-1] @ states[-1])

    dots = np.array(run_ensemble(cfg, final_overlap))
    assert np.mean(dots > 0.99) >= 0.99


@given(st.integers(0, 2**32), st.sampled_from([1.0, 0.5, 0.1]))
def test_radius_never_exceeds_one(seed, eta):
    cfg = _cfg(eta=eta, total=2.0, seed=seed, start=(0.0, 0.0, 0.0))
    states, _ = simulate_arrays(cfg)
    assert np.max(np.linalg.norm(states, axis=1)) <= 1.0 + 1e-9


def test_pure_start_stays_pure_at_eta_one():
    cfg = _cfg(eta=1.0, total=2.0, dt=1e-4, start=(0.6, 0.0, 0.8))
    states, _ = simulate_arrays(cfg)
    assert np.min(np.einsum("ij,ij->i", states, states)) >= 1 - 1e-6


def test_single_detector_collapse_follows_born_rule():
    z0 = 0.4
    cfg = _cfg(params=single_z_detector(), start=(math.sqrt(1 - z0 * z0), 0.0, z0), total=10.0,
               scheme="stratonovich_heun", n=10_000, seed=4)
    final_z = np.array(run_ensemble(cfg, lambda s, r, d, j: s[-1, 2]))
    # collapse time has a long tail; nearly all runs must have settled
    assert np.mean(np.abs(final_z) > 0.99) >= 0.98
    up = np.mean(final_z > 0)
    assert abs(up - (0.5 + z0 / 2)) < 3 * math.sqrt(0.21 / final_z.size)


@pytest.mark.parametrize("scheme", ["bayes", "ito"])
def test_ensemble_mean_decays(scheme):
    cfg = _cfg(eta=0.5, start=(0.6, 0.0, 0.8), total=2.0, n=10_000, seed=8, scheme=scheme)
    idx = [500, 1000, 2000]
    values = np.array(run_ensemble(cfg, lambda s, r, d, j: s[idx]))
    mean = values.mean(axis=0)
    err = values.std(axis=0, ddof=1) / math.sqrt(values.shape[0])
    expected = np.outer(np.exp(-2 * 1.0 * np.array([0.5, 1.0, 2.0])), [0.6, 0.0, 0.8])
    assert np.all(np.abs(mean - expected) <= 3 * err)


def test_ito_ensemble_mean_of_z_at_eta_one():
    cfg = _cfg(eta=1.0, total=1.0, n=10_000, seed=21, scheme="ito")
    z = np.array(run_ensemble(cfg, lambda s, r, d, j: s[-1, 2]))
    assert z.mean() == pytest.approx(math.exp(-1), abs=0.01)


def test_azimuth_is_isotropic():
    cfg = _cfg(eta=1.0, total=1.0, n=10_000, seed=30)
    xy = np.array(run_ensemble(cfg, lambda s, r, d, j: s[-1, :2]))
    phi = np.arctan2(xy[:, 1], xy[:, 0]) % (2 * math.pi)
    counts, _ = np.histogram(phi, bins=16, range=(0, 2 * math.pi))
    assert stats.chisquare(counts).pvalue > 0.01


def test_full_and_radial_purity_distributions_agree():
    cfg = _cfg(eta=0.5, start=(0.0, 0.0, 0.0), total=1.0, n=10_000, seed=41)
    full = np.array(run_ensemble(cfg, lambda s, r, d, j: s[-1] @ s[-1]))
    radial = simulate_radial(0.5, total_time=1.0, dt=1e-3, n_paths=10_000, seed=42) ** 2
    assert stats.ks_2samp(full, radial).pvalue > 0.01


@pytest.mark.slow
def test_radial_stationary_histogram_matches_closed_form():
    r = sample_radial(0.5, n_paths=1000, n_samples=100, burn_in=20.0, sample_every=5.0, dt=1e-3, seed=5)
    P = (r**2).ravel()
    edges = np.linspace(0.0, 1.0, 21)
    counts, _ = np.histogram(P, bins=edges)
    expected = P.size * stationary_bin_probabilities(edges, 0.5)
    keep = expected >= 5
    chi2 = np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep])
    assert stats.chi2.sf(chi2, keep.sum() - 1) > 0.01


# binning -----------------------------------------------------------------


def test_identity_binning():
    cfg = _cfg(total=0.1)
    _, rec = simulate_trajectory(cfg)
    binned = bin_record(rec, cfg.dt)
    assert np.allclose(binned.bins, rec.samples / cfg.dt)


def test_noiseless_bins_equal_half_response():
    dt = 1e-3
    rec = MeasurementRecord(dt, np.tile([0.0, 0.0, 1.0 * dt], (1000, 1)))
    binned = bin_record(rec, 0.1)
    assert binned.bins.shape == (10, 3)
    assert np.allclose(binned.bins[:, 2], 1.0)
    assert binned.bin_times[-1] == pytest.approx(1.0)


def test_bin_bookkeeping_identity_and_partial_bin():
    cfg = _cfg(eta=0.5, total=1.05)
    _, rec = simulate_trajectory(cfg)
    binned = bin_record(rec, 0.1)
    assert binned.bins.shape[0] == 10
    sums = rec.samples[:1000].reshape(10, 100, 3).sum(axis=1)
    assert np.allclose(binned.bins * 0.1, sums, rtol=0, atol=1e-14)


def test_bin_variance_of_frozen_mixed_state(ideal):
    dt, width = 1e-3, 0.05
    k = int(round(width / dt))
    dw = noise_block(noise_generator(2, 0), 10_000 * k, ideal, dt)
    binned = bin_record(MeasurementRecord(dt, dw), width)
    var = binned.bins.var(axis=0, ddof=1)
    assert np.all(np.abs(var / (2.0 / (2 * width)) - 1) < 0.05)


def test_non_commensurate_bin_rejected():
    rec = MeasurementRecord(1e-3, np.zeros((100, 3)))
    with pytest.raises(ConfigError):
        bin_record(rec, 0.0105)


def test_workers_do_not_change_results():
    cfg = _cfg(eta=0.5, total=0.5, n=12, seed=99)
    serial = run_ensemble(cfg, _final_state)
    parallel = run_ensemble(cfg, _final_state, workers=2)
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))


def _final_state(states, record, dw, j):
    return states[-1]


def test_bayes_and_heun_paths_agree_at_fine_dt():
    gaps = []
    for j in range(3):
        ends = {}
        for scheme in ("bayes", "stratonovich_heun"):
            cfg = _cfg(eta=1.0, start=(0.6, 0.0, 0.8), total=1.0, dt=1e-5, seed=112, scheme=scheme, n=3)
            ends[scheme] = simulate_arrays(cfg, j)[0][-1]
        gaps.append(np.linalg.norm(ends["bayes"] - ends["stratonovich_heun"]))
    assert max(gaps) <= 1e-4


@pytest.mark.slow
def test_full_engine_stationary_purity_histogram():
    cfg = _cfg(eta=0.5, start=(0.0, 0.0, 0.0), total=20.0, n=10_000, seed=51)
    P = np.array(run_ensemble(cfg, lambda s, r, d, j: s[-1] @ s[-1]))
    edges = np.linspace(0.0, 1.0, 21)
    counts, _ = np.histogram(P, bins=edges)
    expected = P.size * stationary_bin_probabilities(edges, 0.5)
    keep = expected >= 5
    chi2 = np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep])
    assert stats.chi2.sf(chi2, keep.sum() - 1) > 0.01
