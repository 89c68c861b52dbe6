"""Classically inspired state monitoring and its fidelity score.

Running-window estimators normalize the smoothed record ũ(t); the four
discrete-time algorithms work on bin averages ū^(n) delivered every Δt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import _kernels as K
from .core_model import DetectorParams, MeasurementRecord, QubitState, axis_index
from .errors import DomainError
from .sde_engine import Trajectory, bin_factor, bin_samples

WINDOW_KINDS = ("rectangular", "exponential")
EXP_BURN_IN = 10.0


@dataclass(frozen=True)
class WindowSpec:
    kind: str
    tau: float

    def __post_init__(self) -> None:
        if self.kind not in WINDOW_KINDS:
            raise DomainError(f"window kind must be one of {WINDOW_KINDS}")
        if not self.tau > 0:
            raise DomainError("window duration must be positive")

    @property
    def code(self) -> int:
        return WINDOW_KINDS.index(self.kind)


@dataclass(frozen=True, eq=False)
class EstimateSeries:
    """Estimated Bloch vectors on a time grid, tagged with their algorithm."""

    times: np.ndarray
    vectors: np.ndarray
    algorithm: str
    parameters: dict[str, Any] = field(default_factory=dict)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


def window_filter(record: MeasurementRecord, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed outputs ũ(t) = ∫ g(t − t') u(t') dt' on the fine grid.

    Rectangular windows are reported from t = τ on (full window only);
    exponential windows from the first step, the caller discarding at least
    ``EXP_BURN_IN``·τ of warm-up.
    """
    dt = record.dt
    if spec.kind == "rectangular":
        width = bin_factor(spec.tau, dt) if _commensurate(spec.tau, dt) else int(round(spec.tau / dt))
        if width < 1 or width > record.n_steps:
            raise DomainError("record is shorter than the rectangular window")
        csum = np.vstack([np.zeros(3), np.cumsum(record.samples, axis=0)])
        values = (csum[width:] - csum[:-width]) / (width * dt)
        times = dt * np.arange(width, record.n_steps + 1)
        return times, values
    if record.duration < EXP_BURN_IN * spec.tau:
        raise DomainError(f"exponential window needs a record of at least {EXP_BURN_IN:g}·τ")
    values = K.exp_window(np.ascontiguousarray(record.samples, dtype=float), dt, spec.tau)
    return record.times, values


def _commensurate(a: float, dt: float) -> bool:
    ratio = a / dt
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


def normalize_rows(vectors: np.ndarray, initial: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Row-normalize; a zero row repeats the previous output."""
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=1)
    out = np.empty_like(vectors)
    good = norms > 0
    out[good] = vectors[good] / norms[good, None]
    if not good.all():
        prev = np.asarray(initial, dtype=float)
        for m in range(len(out)):
            if good[m]:
                prev = out[m]
            else:
                out[m] = prev
    return out


def window_estimate(record: MeasurementRecord, spec: WindowSpec) -> EstimateSeries:
    """Pure-state estimate r_est = ũ/|ũ|."""
    times, values = window_filter(record, spec)
    return EstimateSeries(times, normalize_rows(values), f"window:{spec.kind}", {"tau": spec.tau})


def _grid_indices(times: np.ndarray, dt: float, n_states: int) -> np.ndarray:
    idx = np.rint(times / dt).astype(int)
    if np.any(np.abs(idx * dt - times) > 1e-9 * np.maximum(1.0, times)) or idx.min() < 0 or idx.max() >= n_states:
        raise DomainError("estimate times are not aligned with the trajectory grid")
    return idx


def fidelity(true_traj: Trajectory, est: EstimateSeries, t_start: float) -> float:
    """Time average of r(t)·r_est(t) over estimate times t ≥ t_start."""
    idx = _grid_indices(est.times, true_traj.dt, len(true_traj))
    keep = est.times >= t_start - 1e-12
    if not keep.any():
        raise DomainError("no estimate samples after t_start")
    dots = np.einsum("ij,ij->i", true_traj.states[idx[keep]], est.vectors[keep])
    return float(np.mean(dots))


def _ideal_scalars(params: DetectorParams) -> tuple[float, float, float]:
    if not params.is_identical:
        raise DomainError("discrete-time algorithms assume identical detectors")
    return float(params.coupling[0]), params.delta_u_k[0], params.s_k[0]


def _single(algorithm: int, r_prev: Sequence[float], u_vec: Sequence[float], dt_bin: float,
            params: DetectorParams, order: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    if dt_bin <= 0:
        raise DomainError("bin width must be positive")
    a, du, s = _ideal_scalars(params)
    bins = np.asarray(u_vec, dtype=float).reshape(1, 3)
    r0 = np.asarray(r_prev, dtype=float)
    return K.discrete_estimates(bins, dt_bin, algorithm, r0, a, du, s, np.asarray(order, dtype=np.int64))[0]


def _as_vec(state: QubitState | Sequence[float]) -> np.ndarray:
    return state.as_array() if isinstance(state, QubitState) else np.asarray(state, dtype=float)


def alg1_update(r_prev: QubitState, u_vec: Sequence[float], dt_bin: float, params: DetectorParams) -> QubitState:
    """Bayes update treating ū^(n) as one result along ū^(n)/|ū^(n)| with value |ū^(n)|.

    Detectors are taken as ideal (γ = 0). A zero vector leaves the state unchanged.
    """
    return QubitState.from_array(_single(1, _as_vec(r_prev), u_vec, dt_bin, params))


def alg2_update(r_prev: QubitState, u_vec: Sequence[float], dt_bin: float, params: DetectorParams) -> QubitState:
    """Rotate r_prev towards ū^(n) by Δφ = (Δu/S) u_⊥ Δt."""
    vec = _as_vec(r_prev)
    if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
        raise DomainError("Algorithm 2 is defined for pure (unit) states only")
    return QubitState.from_array(_single(2, vec, u_vec, dt_bin, params))


def alg3_update(r_prev: QubitState, u_vec: Sequence[float], dt_bin: float, params: DetectorParams,
                order: Sequence[str | int] = ("x", "y", "z")) -> QubitState:
    """Sequential Bayes updates along the Cartesian axes in ``order``."""
    codes = [axis_index(a) for a in order]
    if sorted(codes) != [0, 1, 2]:
        raise DomainError("order must be a permutation of x, y, z")
    return QubitState.from_array(_single(3, _as_vec(r_prev), u_vec, dt_bin, params, codes))


def alg4_estimate(u_vec: Sequence[float], previous: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """ū^(n)/|ū^(n)|, holding ``previous`` for a zero vector."""
    u = np.asarray(u_vec, dtype=float)
    norm = float(np.linalg.norm(u))
    return u / norm if norm > 0 else np.asarray(previous, dtype=float)


ALGORITHMS = (1, 2, 3, 4)


def discrete_series(
    record: MeasurementRecord,
    bin_width: float,
    algorithm: int,
    params: DetectorParams,
    r0: QubitState | Sequence[float] = (0.0, 0.0, 1.0),
    order: Sequence[str | int] = ("x", "y", "z"),
) -> EstimateSeries:
    """Run one algorithm over a whole record; estimates sit at t_n = nΔt."""
    if algorithm not in ALGORITHMS:
        raise DomainError(f"algorithm must be one of {ALGORITHMS}")
    a, du, s = _ideal_scalars(params)
    k = bin_factor(bin_width, record.dt)
    bins = record.bins if record.bins is not None and record.bin_width == k * record.dt else bin_samples(
        record.samples, k, record.dt
    )
    start = _as_vec(r0)
    if algorithm == 2 and abs(np.linalg.norm(start) - 1.0) > 1e-9:
        raise DomainError("Algorithm 2 is defined for pure (unit) states only")
    codes = np.array([axis_index(x) for x in order], dtype=np.int64)
    est = K.discrete_estimates(np.ascontiguousarray(bins), k * record.dt, algorithm, start, a, du, s, codes)
    times = k * record.dt * np.arange(1, bins.shape[0] + 1)
    return EstimateSeries(times, est, f"algorithm{algorithm}", {"bin_width": k * record.dt})


def window_scores(states: np.ndarray, record: np.ndarray, dt: float, spec: WindowSpec, t_start: float
                  ) -> tuple[float, float, float]:
    """Per-trajectory (F, ⟨cos φ⟩_t, ⟨r⟩_t) for a window estimator, in one pass."""
    start = int(math.ceil(t_start / dt - 1e-9))
    if spec.kind == "rectangular" and start < int(round(spec.tau / dt)):
        raise DomainError("t_start must not precede the first full rectangular window")
    s_dot, s_cos, s_r, count = K.window_scores(states, record, dt, spec.tau, spec.code, start)
    if count == 0:
        raise DomainError("no samples after t_start")
    return s_dot / count, s_cos / count, s_r / count
