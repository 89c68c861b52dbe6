"""Conditional qubit evolution driven by simulated detector noise.

Three fine-step schemes share one record convention: the increment
w_k = (Δu_k/2) r_k dt + dw_k is formed from the pre-step true state, and the
filter then advances the state from w.

``bayes``
    Exact quantum Bayes map exp(½ a w·σ) ρ exp(½ a w·σ)/Tr along the
    instantaneous record direction, followed by intrinsic dephasing. It keeps
    the state inside the Bloch ball to rounding and preserves purity at η = 1.
``ito``
    Euler–Maruyama on the Itô form dr_i = −(Σ_{k≠i} Γ_k) r_i dt + a_i dw_i
    − r_i Σ_k a_k r_k dw_k, driven by the innovation w − (Δu/2) r dt.
``stratonovich_heun``
    Heun predictor-corrector on the record-driven Stratonovich form
    ṙ_i = a_i u_i − r_i Σ_k a_k r_k u_k − (Σ_{k≠i} γ_k) r_i.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import _kernels as K
from .core_model import (
    CLAMP_LIMIT,
    DetectorParams,
    MeasurementRecord,
    QubitState,
    SimulationConfig,
    project_to_ball,
)
from .errors import ConfigError, DomainError, PhysicalityError
from .noise import noise_block, noise_generator, noise_scale

RADIAL_START = 1e-6


@dataclass(frozen=True)
class NoiseIncrement:
    """Gaussian increments ∫ξ_k dt over one fine step."""

    dw: tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array(self.dw, dtype=float)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    seed: int
    dt: float
    scheme: str
    trajectory_index: int = 0
    point: int = 0

    def __len__(self) -> int:
        return int(self.states.shape[0])

    def state(self, m: int) -> QubitState:
        return QubitState.from_array(self.states[m])

    @property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.states, self.states))

    @property
    def purity(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.states, self.states)


@dataclass(frozen=True, eq=False)
class EngineArrays:
    """Per-axis coefficients in the form the compiled kernels consume."""

    half_du: np.ndarray
    coupling: np.ndarray
    ito_rates: np.ndarray
    dephase_rates: np.ndarray

    @classmethod
    def from_params(cls, params: DetectorParams) -> EngineArrays:
        gamma = np.asarray(params.gamma_k)
        total = params.total_dephasing
        # component i dephases through the detectors on the two other axes
        ito_rates = total.sum() - total
        dephase_rates = gamma.sum() - gamma
        return cls(0.5 * np.asarray(params.delta_u_k), params.coupling, ito_rates, dephase_rates)

    def args(self) -> tuple[np.ndarray, ...]:
        return self.half_du, self.coupling, self.ito_rates, self.dephase_rates


def overshoot_limit(scheme: str, dt: float) -> float:
    """Largest radial overshoot that is projected back instead of raising."""
    if scheme == "bayes":
        return CLAMP_LIMIT
    return max(CLAMP_LIMIT, 10.0 * math.sqrt(dt))


def _scheme_code(scheme: str) -> int:
    try:
        return K.SCHEME_CODES[scheme]
    except KeyError:
        raise ConfigError(f"unknown scheme {scheme!r}") from None


def sample_noise(gen: np.random.Generator, params: DetectorParams, dt: float) -> NoiseIncrement:
    """Draw dw_k ~ N(0, S_k dt/2), advancing ``gen``."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    dw = gen.standard_normal(3) * noise_scale(params, dt)
    return NoiseIncrement(tuple(float(v) for v in dw))  # type: ignore[arg-type]


def _step(state: QubitState, w: np.ndarray, params: DetectorParams, dt: float, scheme: str) -> QubitState:
    arrays = EngineArrays.from_params(params)
    out = np.empty(3)
    decay = np.exp(-arrays.dephase_rates * dt)
    K.filter_step(state.as_array(), np.asarray(w, float), dt, _scheme_code(scheme), *arrays.args(), decay, out)
    return QubitState.from_array(project_to_ball(out, overshoot_limit(scheme, dt)))


def _record_increment(state: QubitState, dw: np.ndarray, params: DetectorParams, dt: float) -> np.ndarray:
    return 0.5 * np.asarray(params.delta_u_k) * state.as_array() * dt + dw


def step_ito(state: QubitState, noise: NoiseIncrement, params: DetectorParams, dt: float) -> QubitState:
    """One Euler–Maruyama step of the Itô equation for arbitrary detectors."""
    return _step(state, _record_increment(state, noise.as_array(), params, dt), params, dt, "ito")


def step_ito_identical(state: QubitState, noise: NoiseIncrement, params: DetectorParams, dt: float) -> QubitState:
    """Euler–Maruyama step of dr = −2Γ r dt + a{dw(1 − r²) − r × (r × dw)}."""
    if not params.is_identical:
        raise DomainError("step_ito_identical requires three identical detectors")
    return step_ito(state, noise, params, dt)


def step_stratonovich_general(
    state: QubitState, record_increment: Sequence[float], params: DetectorParams, dt: float
) -> QubitState:
    """Heun step of the record-driven Stratonovich filter; all axes updated together."""
    return _step(state, np.asarray(record_increment, float), params, dt, "stratonovich_heun")


def step_bayes(
    state: QubitState, record_increment: Sequence[float], params: DetectorParams, dt: float
) -> QubitState:
    return _step(state, np.asarray(record_increment, float), params, dt, "bayes")


def step_radial(r: float, noise_r: float, params: DetectorParams, dt: float) -> float:
    """Euler–Maruyama step of ṙ = 2Γ₀(1/r − r/η) + a(1 − r²)ξ_r."""
    if not params.is_identical:
        raise DomainError("the radial equation holds for identical detectors only")
    if not (0.0 < r <= 1.0):
        raise DomainError(f"radius must lie in (0, 1], got {r}")
    gamma0 = float(params.gamma0[0])
    eta = float(params.efficiency[0])
    a = float(params.coupling[0])
    new = r + 2.0 * gamma0 * (1.0 / r - r / eta) * dt + a * (1.0 - r * r) * noise_r
    if new > 1.0:
        if new - 1.0 > overshoot_limit("ito", dt):
            raise PhysicalityError(f"radial step overshoot to {new}")
        new = 1.0
    return new


def simulate_arrays(
    config: SimulationConfig, trajectory: int = 0, point: int = 0, *, return_noise: bool = False
) -> tuple[np.ndarray, ...]:
    """Raw (states, record[, noise]) arrays for one trajectory."""
    gen = noise_generator(config.seed, trajectory, point)
    dw = noise_block(gen, config.n_steps, config.params, config.dt)
    arrays = EngineArrays.from_params(config.params)
    limit = overshoot_limit(config.scheme, config.dt)
    states, record, failed = K.simulate_path(
        config.initial_state.as_array(), dw, config.dt, _scheme_code(config.scheme), *arrays.args(), limit
    )
    if failed >= 0:
        raise PhysicalityError(
            f"trajectory {trajectory} left the Bloch ball at step {failed} "
            f"(|r| = {np.linalg.norm(states[-1]):.9g}, scheme {config.scheme})"
        )
    if return_noise:
        return states, record, dw
    return states, record


def simulate_trajectory(
    config: SimulationConfig, trajectory: int = 0, point: int = 0
) -> tuple[Trajectory, MeasurementRecord]:
    """Integrate one trajectory; deterministic given (seed, point, trajectory)."""
    states, record = simulate_arrays(config, trajectory, point)
    times = config.dt * np.arange(states.shape[0])
    traj = Trajectory(times, states, config.seed, config.dt, config.scheme, trajectory, point)
    return traj, MeasurementRecord(config.dt, record)


def replay_filter(
    record: MeasurementRecord,
    initial_state: QubitState,
    params: DetectorParams,
    scheme: str = "bayes",
) -> np.ndarray:
    """States obtained by filtering a stored record from ``initial_state``."""
    arrays = EngineArrays.from_params(params)
    states, failed = K.replay_path(
        initial_state.as_array(),
        np.ascontiguousarray(record.samples, dtype=float),
        record.dt,
        _scheme_code(scheme),
        *arrays.args(),
        overshoot_limit(scheme, record.dt),
    )
    if failed >= 0:
        raise PhysicalityError(f"filter left the Bloch ball at step {failed}")
    return states


def bin_factor(bin_width: float, dt: float) -> int:
    ratio = bin_width / dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"bin width {bin_width} is not an integer multiple of dt = {dt}")
    return k


def bin_samples(samples: np.ndarray, k: int, dt: float) -> np.ndarray:
    n_bins = samples.shape[0] // k
    return samples[: n_bins * k].reshape(n_bins, k, 3).sum(axis=1) / (k * dt)


def bin_record(record: MeasurementRecord, bin_width: float) -> MeasurementRecord:
    """Attach bin averages ū_k^(n) = (Σ fine increments in bin n)/Δt.

    A trailing partial bin is dropped.
    """
    k = bin_factor(bin_width, record.dt)
    bins = bin_samples(record.samples, k, record.dt)
    return MeasurementRecord(record.dt, record.samples, bins, k * record.dt)


def simulate_radial(
    eta: float,
    *,
    total_time: float,
    dt: float,
    n_paths: int,
    seed: int,
    r0: float = RADIAL_START,
    point: int = 0,
) -> np.ndarray:
    """Final radii of ``n_paths`` independent radial-equation paths.

    Paths starting at the singular point r = 0 begin at ``RADIAL_START``
    instead; the 2Γ₀/r drift is treated implicitly so the first steps stay
    finite.
    """
    from .core_model import identical_detectors_from_eta

    params = identical_detectors_from_eta(eta)
    if not (0.0 < r0 <= 1.0):
        raise DomainError("radial paths need 0 < r0 ≤ 1")
    n_steps = bin_factor(total_time, dt)
    sigma = float(np.sqrt(params.s_k[0] * dt / 2.0))
    out = np.empty(n_paths)
    for p in range(n_paths):
        xi = noise_generator(seed, p, point).standard_normal(n_steps) * sigma
        out[p] = K.radial_paths(
            float(r0), xi[None, :], dt, float(params.gamma0[0]), float(eta), float(params.coupling[0])
        )[0]
    return out


def sample_radial(
    eta: float,
    *,
    n_paths: int,
    n_samples: int,
    burn_in: float,
    sample_every: float,
    dt: float,
    seed: int,
    r0: float = RADIAL_START,
    point: int = 0,
) -> np.ndarray:
    """Radii sampled along long radial paths, shape (n_paths, n_samples).

    Each path is discarded for ``burn_in`` and then read every
    ``sample_every``; consecutive samples are only approximately independent.
    """
    from .core_model import identical_detectors_from_eta

    params = identical_detectors_from_eta(eta)
    burn = bin_factor(burn_in, dt) if burn_in > 0 else 0
    every = bin_factor(sample_every, dt)
    n_steps = burn + every * n_samples
    sigma = float(np.sqrt(params.s_k[0] * dt / 2.0))
    out = np.empty((n_paths, n_samples))
    for p in range(n_paths):
        xi = noise_generator(seed, p, point).standard_normal(n_steps) * sigma
        out[p] = K.radial_samples(
            float(r0), xi, dt, float(params.gamma0[0]), float(eta), float(params.coupling[0]), burn, every
        )
    return out


def _ensemble_chunk(args: tuple[Any, ...]) -> list[Any]:
    config, reducer, point, indices = args
    results = []
    for j in indices:
        states, record, dw = simulate_arrays(config, j, point, return_noise=True)
        results.append(reducer(states, record, dw, j))
    return results


def run_ensemble(
    config: SimulationConfig,
    reducer: Callable[[np.ndarray, np.ndarray, np.ndarray, int], Any],
    *,
    point: int = 0,
    workers: int = 1,
    n_trajectories: int | None = None,
    executor: Executor | None = None,
) -> list[Any]:
    """Apply ``reducer(states, record, noise, index)`` to every trajectory.

    Results come back ordered by trajectory index, so any downstream
    reduction is independent of ``workers``. ``reducer`` must be picklable
    when work is sent to other processes. A caller-owned ``executor`` takes
    precedence over ``workers``.
    """
    n = config.ensemble_size if n_trajectories is None else int(n_trajectories)
    indices = list(range(n))
    if executor is None and (workers <= 1 or n < 2):
        return _ensemble_chunk((config, reducer, point, indices))
    n_chunks = min(n, 4 * max(workers, getattr(executor, "_max_workers", 1)))
    chunks = [indices[i::n_chunks] for i in range(n_chunks)]
    tasks = [(config, reducer, point, c) for c in chunks]
    if executor is not None:
        parts = list(executor.map(_ensemble_chunk, tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_ensemble_chunk, tasks))
    results: list[Any] = [None] * n
    for chunk, part in zip(chunks, parts):
        for j, res in zip(chunk, part):
            results[j] = res
    return results
