"""Finite-duration quantum Bayes update along a single measurement axis.

For a detector along unit vector n̂ integrated over τ, the two outcome
densities are Gaussians centred at ±Δu/2 with variance S/2τ, weighted by the
diagonal elements ρ₁₁ = (1 + n̂·r)/2 and ρ₂₂ = (1 − n̂·r)/2. The update
multiplies the diagonals by their likelihoods and the coherence by
√(P₁P₂)/P_tot · e^{−γτ}. In Bloch form with λ = ū Δu τ / S:

    r_n' = (tanh λ + r_n) / (1 + r_n tanh λ)
    r_⊥' = r_⊥ e^{−γτ} / (cosh λ (1 + r_n tanh λ))

Large |λ| switches to log-sum-exp weights so extreme outcomes never produce
0/0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .core_model import AXES, DetectorParams, QubitState, axis_index, project_to_ball
from .errors import DomainError, NumericalUnderflowError


@dataclass(frozen=True)
class BayesBasis:
    """Measurement direction n̂; the update acts in the eigenbasis of n̂·σ."""

    axis: tuple[float, float, float]

    def __post_init__(self) -> None:
        vec = tuple(float(v) for v in self.axis)
        if len(vec) != 3:
            raise DomainError("basis axis must have 3 components")
        norm = math.sqrt(sum(v * v for v in vec))
        if abs(norm - 1.0) > 1e-12:
            raise DomainError(f"basis axis must be a unit vector, |n| = {norm!r}")
        object.__setattr__(self, "axis", vec)

    @classmethod
    def along(cls, direction: Sequence[float] | str | int) -> BayesBasis:
        """Basis along a Cartesian axis name/index or any non-zero vector."""
        if isinstance(direction, (str, int, np.integer)):
            vec = [0.0, 0.0, 0.0]
            vec[axis_index(direction)] = 1.0
            return cls(tuple(vec))  # type: ignore[arg-type]
        arr = np.asarray(direction, dtype=float)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise DomainError("cannot build a basis from the zero vector")
        return cls(tuple(arr / norm))  # type: ignore[arg-type]

    def as_array(self) -> np.ndarray:
        return np.array(self.axis)

    def cartesian_axis(self) -> int | None:
        for k in range(3):
            if self.axis[k] == 1.0:
                return k
        return None

    def frame(self) -> np.ndarray:
        """Right-handed orthonormal frame (e₁, e₂, n̂) as rows.

        e₁ comes from Gram–Schmidt of the Cartesian unit vector along the
        smallest-magnitude component of n̂.
        """
        n = self.as_array()
        seed = np.zeros(3)
        seed[int(np.argmin(np.abs(n)))] = 1.0
        e1 = seed - (seed @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return np.vstack([e1, e2, n])


def _channel(params: DetectorParams, basis: BayesBasis) -> tuple[float, float, float]:
    """(Δu, S, γ) attributed to a measurement along ``basis``."""
    k = basis.cartesian_axis()
    if k is not None:
        return params.delta_u_k[k], params.s_k[k], params.gamma_k[k]
    if not params.is_identical:
        raise DomainError("off-axis Bayes updates need identical detectors")
    return params.delta_u_k[0], params.s_k[0], params.gamma_k[0]


@dataclass(frozen=True)
class OutcomeDistribution:
    """Two-component Gaussian mixture for the integrated result ū."""

    weights: tuple[float, float]
    means: tuple[float, float]
    variance: float

    def component(self, i: int, u_bar: float | np.ndarray) -> np.ndarray:
        z = (np.asarray(u_bar, dtype=float) - self.means[i]) ** 2 / (2.0 * self.variance)
        return np.exp(-z) / math.sqrt(2.0 * math.pi * self.variance)

    def __call__(self, u_bar: float | np.ndarray) -> np.ndarray:
        return self.weights[0] * self.component(0, u_bar) + self.weights[1] * self.component(1, u_bar)

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        first = gen.random(size) < self.weights[0]
        centre = np.where(first, self.means[0], self.means[1])
        return centre + gen.standard_normal(size) * math.sqrt(self.variance)


def outcome_pdf(state: QubitState, basis: BayesBasis, tau: float, params: DetectorParams) -> OutcomeDistribution:
    """P_tot(ū) = Σ_i ρ_ii P_i(ū) for a measurement of duration ``tau``."""
    if tau <= 0:
        raise DomainError("measurement duration must be positive")
    delta_u, s, _ = _channel(params, basis)
    rn = float(np.dot(state.as_array(), basis.as_array()))
    rn = min(1.0, max(-1.0, rn))
    return OutcomeDistribution(
        weights=((1.0 + rn) / 2.0, (1.0 - rn) / 2.0),
        means=(delta_u / 2.0, -delta_u / 2.0),
        variance=s / (2.0 * tau),
    )


def bayes_update(
    state: QubitState, basis: BayesBasis, u_bar: float, tau: float, params: DetectorParams
) -> QubitState:
    """Condition ``state`` on the time-averaged result ``u_bar`` over ``tau``."""
    if tau <= 0:
        raise DomainError("measurement duration must be positive")
    if not state.is_physical:
        raise DomainError("input state lies outside the Bloch ball")
    delta_u, s, gamma = _channel(params, basis)
    if s == 0:
        raise DomainError(f"detector along {basis.axis} has zero noise density")
    lam = u_bar * delta_u * tau / s
    try:
        out = K.bayes_kick(state.as_array(), basis.as_array(), float(lam), math.exp(-gamma * tau))
    except ArithmeticError as exc:
        raise NumericalUnderflowError(
            "P_tot(ū) underflowed; rescale ū or evaluate in extended precision"
        ) from exc
    return QubitState.from_array(project_to_ball(out))


def chained_update(
    state: QubitState,
    axes: Sequence[str | int],
    u_bars: Sequence[float],
    tau: float,
    params: DetectorParams,
) -> QubitState:
    """Sequential single-axis updates, each over duration ``tau``."""
    if len(axes) != len(u_bars):
        raise DomainError("need one result per axis")
    for axis, u_bar in zip(axes, u_bars):
        state = bayes_update(state, BayesBasis.along(axis), float(u_bar), tau, params)
    return state


__all__ = [
    "AXES",
    "BayesBasis",
    "OutcomeDistribution",
    "bayes_update",
    "chained_update",
    "outcome_pdf",
]
