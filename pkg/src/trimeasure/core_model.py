"""Physical parameterization and value types shared by every module.

Units follow the normalization Δu = 2, S = 2 so that the coupling a = Δu/S = 1,
the single-detector dephasing Γ₀ = Δu²/4S = 1/2 and the measurement time
τ_meas = 2S/Δu² = 1. All times are therefore in units of τ_meas.

Classical back-action is assumed absent and there is no Hamiltonian term.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DomainError, PhysicalityError

AXES = ("x", "y", "z")
EPS_TOL = 1e-9
CLAMP_LIMIT = 1e-6
SCHEMES = ("bayes", "ito", "stratonovich_heun")

CANONICAL_DELTA_U = 2.0
CANONICAL_S = 2.0


def axis_index(axis: str | int) -> int:
    if isinstance(axis, (int, np.integer)):
        if 0 <= int(axis) < 3:
            return int(axis)
    elif axis in AXES:
        return AXES.index(axis)
    raise DomainError(f"unknown axis {axis!r}; expected one of {AXES}")


def _triple(name: str, values: Sequence[float]) -> tuple[float, float, float]:
    try:
        out = tuple(float(v) for v in values)
    except TypeError as exc:
        raise ConfigError(f"{name} must be a sequence of 3 reals") from exc
    if len(out) != 3 or not all(math.isfinite(v) for v in out):
        raise ConfigError(f"{name} must hold 3 finite reals, got {values!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class DetectorParams:
    """Per-detector response, noise density and intrinsic dephasing.

    Parameters
    ----------
    delta_u_k : tuple of 3 floats
        Difference of the mean detector signal between the two eigenstates.
        Zero switches a detector's back-action off.
    s_k : tuple of 3 floats
        One-sided noise spectral densities. Zero is allowed only together
        with ``delta_u_k == 0`` (detector absent, noiseless record).
    gamma_k : tuple of 3 floats
        Intrinsic single-qubit dephasing rate attributed to each detector.
    """

    delta_u_k: tuple[float, float, float]
    s_k: tuple[float, float, float]
    gamma_k: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        du = _triple("delta_u_k", self.delta_u_k)
        s = _triple("s_k", self.s_k)
        g = _triple("gamma_k", self.gamma_k)
        object.__setattr__(self, "delta_u_k", du)
        object.__setattr__(self, "s_k", s)
        object.__setattr__(self, "gamma_k", g)
        for k in range(3):
            if s[k] < 0:
                raise ConfigError(f"s_k[{k}] must be non-negative, got {s[k]}")
            if s[k] == 0 and du[k] != 0:
                raise ConfigError(f"detector {AXES[k]} has Δu ≠ 0 but S = 0 (infinite coupling)")
            if g[k] < 0:
                raise ConfigError(f"gamma_k[{k}] must be non-negative, got {g[k]}")

    @property
    def coupling(self) -> np.ndarray:
        """a_k = Δu_k / S_k (zero for a switched-off detector)."""
        return np.array(
            [du / s if du != 0 else 0.0 for du, s in zip(self.delta_u_k, self.s_k)]
        )

    @property
    def gamma0(self) -> np.ndarray:
        """Measurement-induced dephasing Γ₀,k = Δu_k²/(4 S_k)."""
        return np.array(
            [du * du / (4 * s) if du != 0 else 0.0 for du, s in zip(self.delta_u_k, self.s_k)]
        )

    @property
    def tau_meas(self) -> np.ndarray:
        """τ_meas,k = 2 S_k/Δu_k²; infinite where the detector is off."""
        return np.array(
            [2 * s / (du * du) if du != 0 else math.inf for du, s in zip(self.delta_u_k, self.s_k)]
        )

    @property
    def total_dephasing(self) -> np.ndarray:
        """Ensemble dephasing Γ_k = γ_k + 1/(2 τ_meas,k)."""
        return np.asarray(self.gamma_k) + self.gamma0

    @property
    def efficiency(self) -> np.ndarray:
        """Per-axis efficiency η_k = Γ₀,k / Γ_k (NaN where Γ_k = 0)."""
        total = self.total_dephasing
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, self.gamma0 / np.where(total > 0, total, 1.0), np.nan)

    @property
    def is_identical(self) -> bool:
        return (
            len(set(self.delta_u_k)) == 1 and len(set(self.s_k)) == 1 and len(set(self.gamma_k)) == 1
        )

    def ideal(self) -> DetectorParams:
        """Same detectors with the intrinsic dephasing removed."""
        return DetectorParams(self.delta_u_k, self.s_k, (0.0, 0.0, 0.0))

    def to_dict(self) -> dict[str, list[float]]:
        return {
            "delta_u_k": list(self.delta_u_k),
            "s_k": list(self.s_k),
            "gamma_k": list(self.gamma_k),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DetectorParams:
        _reject_unknown(data, {"delta_u_k", "s_k", "gamma_k"}, "params")
        missing = {"delta_u_k", "s_k", "gamma_k"} - set(data)
        if missing:
            raise ConfigError(f"params missing keys: {sorted(missing)}")
        return cls(data["delta_u_k"], data["s_k"], data["gamma_k"])


def identical_detectors_from_eta(eta: float) -> DetectorParams:
    """Three identical detectors in canonical units with efficiency ``eta``.

    The intrinsic dephasing is γ = Γ₀(1/η − 1) with Γ₀ = 1/2.
    """
    eta = float(eta)
    if not (0.0 < eta <= 1.0):
        raise DomainError(f"efficiency must lie in (0, 1], got {eta}")
    gamma0 = CANONICAL_DELTA_U**2 / (4 * CANONICAL_S)
    gamma = gamma0 * (1.0 / eta - 1.0)
    return DetectorParams(
        (CANONICAL_DELTA_U,) * 3, (CANONICAL_S,) * 3, (gamma,) * 3
    )


def single_z_detector(eta: float = 1.0) -> DetectorParams:
    """Only the z detector couples to the qubit; x and y records are pure noise."""
    full = identical_detectors_from_eta(eta)
    return DetectorParams(
        (0.0, 0.0, CANONICAL_DELTA_U), full.s_k, (0.0, 0.0, full.gamma_k[2])
    )


@dataclass(frozen=True)
class QubitState:
    """Bloch vector (x, y, z) = Tr[ρ σ_k]."""

    bloch: tuple[float, float, float]

    def __post_init__(self) -> None:
        vec = _triple("bloch", self.bloch)
        object.__setattr__(self, "bloch", vec)

    @classmethod
    def from_array(cls, vec: Sequence[float]) -> QubitState:
        return cls(tuple(float(v) for v in vec))  # type: ignore[arg-type]

    @classmethod
    def mixed(cls) -> QubitState:
        return cls((0.0, 0.0, 0.0))

    def as_array(self) -> np.ndarray:
        return np.array(self.bloch, dtype=float)

    @property
    def radius(self) -> float:
        return math.sqrt(sum(v * v for v in self.bloch))

    @property
    def is_physical(self) -> bool:
        return self.radius <= 1.0 + EPS_TOL

    @property
    def linear_entropy(self) -> float:
        return 1.0 - purity(self)


def purity(state: QubitState | Sequence[float]) -> float:
    """P = 2 Tr ρ² − 1 = r².

    Values within ``EPS_TOL`` outside the unit ball are clamped to 1.
    """
    vec = state.bloch if isinstance(state, QubitState) else tuple(state)
    p = math.fsum(v * v for v in vec)
    if p > (1.0 + EPS_TOL) ** 2:
        raise PhysicalityError(f"|r| = {math.sqrt(p):.12g} exceeds 1 + {EPS_TOL:g}")
    return min(p, 1.0)


def expected_signal(state: QubitState, axis: str | int, params: DetectorParams) -> float:
    """Noiseless detector output (Δu_k/2) r_k."""
    k = axis_index(axis)
    return 0.5 * params.delta_u_k[k] * state.bloch[k]


def project_to_ball(vec: np.ndarray, limit: float = CLAMP_LIMIT) -> np.ndarray:
    """Return ``vec`` renormalized onto the sphere if it overshoots by at most ``limit``."""
    vec = np.asarray(vec, dtype=float)
    norm = float(np.sqrt(vec @ vec))
    if norm <= 1.0:
        return vec
    if norm - 1.0 > limit:
        raise PhysicalityError(f"|r| = {norm:.12g} overshoots the unit ball by more than {limit:g}")
    return vec / norm


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Integrated detector outputs on a uniform fine grid.

    ``samples[m, k]`` holds w_k = ∫ u_k dt over the step [t_m, t_{m+1}].
    ``bins`` (optional) holds bin-averaged outputs ū_k^(n) over windows of
    width ``bin_width``.
    """

    dt: float
    samples: np.ndarray
    bins: np.ndarray | None = None
    bin_width: float | None = None

    @property
    def n_steps(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """End times t_{m+1} of each fine increment."""
        return self.dt * np.arange(1, self.n_steps + 1)

    @property
    def bin_times(self) -> np.ndarray:
        if self.bins is None or self.bin_width is None:
            raise DomainError("record has not been binned")
        return self.bin_width * np.arange(1, self.bins.shape[0] + 1)


@dataclass(frozen=True)
class SimulationConfig:
    params: DetectorParams
    initial_state: QubitState
    total_time: float
    dt: float = 1e-3
    seed: int = 0
    scheme: str = "bayes"
    ensemble_size: int = 1

    def __post_init__(self) -> None:
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.total_time >= self.dt:
            raise ConfigError(f"total_time ({self.total_time}) must be ≥ dt ({self.dt})")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if int(self.ensemble_size) < 1:
            raise ConfigError("ensemble_size must be ≥ 1")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.initial_state.is_physical:
            raise ConfigError("initial_state lies outside the Bloch ball")
        ratio = self.total_time / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ConfigError("total_time must be an integer multiple of dt")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "ensemble_size", int(self.ensemble_size))

    @property
    def n_steps(self) -> int:
        return int(round(self.total_time / self.dt))

    def production_warnings(self) -> list[str]:
        notes = []
        finite = self.params.tau_meas[np.isfinite(self.params.tau_meas)]
        if finite.size and self.dt > finite.min() / 100:
            notes.append(
                f"dt = {self.dt:g} exceeds τ_meas/100 = {finite.min() / 100:g}; "
                "results carry visible discretization bias"
            )
        return notes

    def validate(self) -> None:
        for note in self.production_warnings():
            warnings.warn(note, stacklevel=2)

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "initial_state": list(self.initial_state.bloch),
            "total_time": self.total_time,
            "dt": self.dt,
            "seed": self.seed,
            "scheme": self.scheme,
            "ensemble_size": self.ensemble_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SimulationConfig:
        if not isinstance(data, dict):
            raise ConfigError("simulation config must be a JSON object")
        fields = {"params", "initial_state", "total_time", "dt", "seed", "scheme", "ensemble_size"}
        _reject_unknown(data, fields, "simulation config")
        for key in ("params", "initial_state", "total_time"):
            if key not in data:
                raise ConfigError(f"simulation config missing {key!r}")
        state = data["initial_state"]
        if isinstance(state, dict):
            _reject_unknown(state, {"bloch"}, "initial_state")
            state = state.get("bloch")
        kwargs: dict[str, Any] = {
            "params": DetectorParams.from_dict(data["params"]),
            "initial_state": QubitState(state),
            "total_time": _real(data["total_time"], "total_time"),
        }
        if "dt" in data:
            kwargs["dt"] = _real(data["dt"], "dt")
        if "seed" in data:
            kwargs["seed"] = _integer(data["seed"], "seed")
        if "scheme" in data:
            kwargs["scheme"] = data["scheme"]
        if "ensemble_size" in data:
            kwargs["ensemble_size"] = _integer(data["ensemble_size"], "ensemble_size")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str | Path) -> SimulationConfig:
        if isinstance(text, Path):
            text = text.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def _reject_unknown(data: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _real(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return value
