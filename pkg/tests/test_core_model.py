from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trimeasure import (
    ConfigError,
    DetectorParams,
    DomainError,
    PhysicalityError,
    QubitState,
    SimulationConfig,
    expected_signal,
    identical_detectors_from_eta,
    purity,
    single_z_detector,
)
from trimeasure.core_model import project_to_ball

unit = st.floats(-1.0, 1.0, allow_nan=False)
etas = st.floats(1e-3, 1.0, allow_nan=False, exclude_min=True)


@pytest.mark.parametrize(
    "eta, gamma, total",
    [(1.0, 0.0, 0.5), (0.5, 0.5, 1.0), (0.1, 4.5, 5.0)],
)
def test_identical_detectors_examples(eta, gamma, total):
    p = identical_detectors_from_eta(eta)
    assert p.gamma_k == pytest.approx((gamma,) * 3, abs=1e-12)
    assert p.total_dephasing == pytest.approx([total] * 3, abs=1e-12)
    assert p.tau_meas == pytest.approx([1.0] * 3)
    assert p.coupling == pytest.approx([1.0] * 3)
    assert p.gamma0 == pytest.approx([0.5] * 3)


@pytest.mark.parametrize("eta", [0.0, -0.2, 1.0000001, 2.0, math.nan])
def test_identical_detectors_rejects_bad_eta(eta):
    with pytest.raises(DomainError):
        identical_detectors_from_eta(eta)


@given(etas)
def test_efficiency_round_trip(eta):
    p = identical_detectors_from_eta(eta)
    assert p.is_identical
    assert np.allclose(p.efficiency, eta, rtol=1e-13)
    # identical detectors share every derived triple
    for arr in (p.coupling, p.tau_meas, p.total_dephasing):
        assert np.all(arr == arr[0])


def test_single_z_detector_switches_off_x_and_y():
    p = single_z_detector()
    assert p.coupling.tolist() == [0.0, 0.0, 1.0]
    assert p.gamma0.tolist() == [0.0, 0.0, 0.5]
    assert math.isinf(p.tau_meas[0])
    assert not p.is_identical


def test_detector_params_validation():
    with pytest.raises(ConfigError):
        DetectorParams((2, 2, 2), (2, 0, 2), (0, 0, 0))
    with pytest.raises(ConfigError):
        DetectorParams((2, 2, 2), (2, 2, 2), (0, -0.1, 0))
    with pytest.raises(ConfigError):
        DetectorParams((2, 2), (2, 2, 2), (0, 0, 0))
    off = DetectorParams((0, 2, 2), (0, 2, 2), (0, 0, 0))
    assert off.coupling[0] == 0.0


@pytest.mark.parametrize(
    "bloch, axis, value",
    [((0, 0, 1), "z", 1.0), ((0, 0, 0), "x", 0.0), ((0, 0, 0), "y", 0.0), ((0.6, 0, 0.8), "x", 0.6)],
)
def test_expected_signal_examples(bloch, axis, value, ideal):
    assert expected_signal(QubitState(bloch), axis, ideal) == pytest.approx(value)


def test_expected_signal_unknown_axis(ideal):
    with pytest.raises(DomainError):
        expected_signal(QubitState((0, 0, 1)), "w", ideal)


@pytest.mark.parametrize("bloch, value", [((1, 0, 0), 1.0), ((0, 0, 0), 0.0), ((0.3, 0.4, 0), 0.25)])
def test_purity_examples(bloch, value):
    assert purity(QubitState(bloch)) == pytest.approx(value)


def test_purity_clamps_within_tolerance_and_rejects_beyond():
    assert purity(QubitState((0, 0, 1 + 5e-10))) == 1.0
    with pytest.raises(PhysicalityError):
        purity(QubitState((0, 0, 1 + 1e-6)))


@given(unit, unit, unit, st.floats(0, 2 * math.pi), st.floats(0, math.pi))
def test_purity_rotation_invariant(x, y, z, phi, theta):
    v = np.array([x, y, z])
    v = v / max(1.0, np.linalg.norm(v))
    rz = np.array([[math.cos(phi), -math.sin(phi), 0], [math.sin(phi), math.cos(phi), 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, math.cos(theta), -math.sin(theta)], [0, math.sin(theta), math.cos(theta)]])
    w = rx @ rz @ v
    assert purity(QubitState.from_array(w)) == pytest.approx(purity(QubitState.from_array(v)), abs=1e-12)


def test_project_to_ball():
    assert np.array_equal(project_to_ball(np.array([0.0, 0.6, 0.8])), [0.0, 0.6, 0.8])
    out = project_to_ball(np.array([0.0, 0.0, 1.0 + 5e-7]))
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(PhysicalityError):
        project_to_ball(np.array([0.0, 0.0, 1.0 + 2e-6]))


def _config(**kw):
    base = dict(params=identical_detectors_from_eta(0.5), initial_state=QubitState((0, 0, 1)), total_time=1.0)
    base.update(kw)
    return SimulationConfig(**base)


def test_config_json_round_trip():
    cfg = _config(dt=1e-4, seed=2**63 + 5, scheme="ito", ensemble_size=7)
    again = SimulationConfig.from_json(cfg.to_json())
    assert again == cfg
    assert set(json.loads(cfg.to_json())) == {
        "params", "initial_state", "total_time", "dt", "seed", "scheme", "ensemble_size",
    }


def test_config_rejects_unknown_keys():
    data = _config().to_dict()
    data["tmax"] = 3
    with pytest.raises(ConfigError, match="unknown"):
        SimulationConfig.from_dict(data)
    data = _config().to_dict()
    data["params"]["k_backaction"] = 0
    with pytest.raises(ConfigError, match="unknown"):
        SimulationConfig.from_dict(data)


@pytest.mark.parametrize(
    "kw",
    [
        {"dt": 0.0},
        {"dt": -1e-3},
        {"total_time": 1e-4, "dt": 1e-3},
        {"total_time": 1.0005, "dt": 1e-3},
        {"scheme": "milstein"},
        {"ensemble_size": 0},
        {"seed": -1},
        {"initial_state": QubitState((0, 0, 1.1))},
    ],
)
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        _config(**kw)


def test_config_type_strictness():
    data = _config().to_dict()
    data["seed"] = 1.5
    with pytest.raises(ConfigError):
        SimulationConfig.from_dict(data)
    data = _config().to_dict()
    data["total_time"] = "1"
    with pytest.raises(ConfigError):
        SimulationConfig.from_dict(data)


def test_production_warning_on_coarse_dt():
    assert _config(dt=1e-3).production_warnings() == []
    notes = _config(dt=0.05, total_time=1.0).production_warnings()
    assert notes and "τ_meas/100" in notes[0]
    with pytest.warns(UserWarning):
        _config(dt=0.05, total_time=1.0).validate()
