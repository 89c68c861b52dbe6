"""Closed-form and PDE reference results used as Monte Carlo oracles.

Everything is in canonical units unless a ``gamma0`` argument says otherwise.
For identical detectors the purity P = r² obeys an Itô diffusion with

    A(P) = 2Γ₀[2(1 − P/η) + (1 − P)²],   B(P) = 8Γ₀ P (1 − P)²

whose stationary law is

    p_st(P) ∝ √P (1 − P)⁻³ exp[−P(1 − η)/((1 − P)η)].
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import legendre
from scipy import integrate

from .core_model import DetectorParams, axis_index, identical_detectors_from_eta
from .errors import DomainError

GAMMA0 = 0.5
SPLIT = 0.9
LEGENDRE_TOL = 1e-12
LEGENDRE_CAP = 10_000
SMALL_V = 1e-4


def _check_eta(eta: float, *, allow_one: bool = True) -> float:
    eta = float(eta)
    if not (0.0 < eta <= 1.0):
        raise DomainError(f"efficiency must lie in (0, 1], got {eta}")
    if eta == 1.0 and not allow_one:
        raise DomainError("η = 1 has a δ-function stationary law at P = 1")
    return eta


# stationary purity law -----------------------------------------------------


def _log_unnormalized(P: np.ndarray, eta: float) -> np.ndarray:
    c = (1.0 - eta) / eta
    with np.errstate(divide="ignore"):
        return 0.5 * np.log(P) - 3.0 * np.log1p(-P) - c * P / (1.0 - P)


def stationary_moment(eta: float, g: Callable[[float], float] = lambda p: 1.0, *, normalized: bool = True) -> float:
    """∫ g(P) p_st(P) dP.

    The interval is split at P = 0.9. Above it the substitution s = P/(1 − P)
    turns the (1 − P)⁻³ growth into a plain exponential tail in s.
    """
    eta = _check_eta(eta)
    if eta == 1.0:
        return float(g(1.0))
    c = (1.0 - eta) / eta

    def low(p: float) -> float:
        return g(p) * math.exp(float(_log_unnormalized(np.array(p), eta))) if p > 0 else 0.0

    def high(s: float) -> float:
        p = s / (1.0 + s)
        return g(p) * math.sqrt(s * (1.0 + s)) * math.exp(-c * s)

    s0 = SPLIT / (1.0 - SPLIT)
    total = integrate.quad(low, 0.0, SPLIT, limit=200, epsabs=0, epsrel=1e-12)[0]
    total += integrate.quad(high, s0, np.inf, limit=200, epsabs=0, epsrel=1e-12)[0]
    if not normalized:
        return total
    return total / _normalization(eta)


@functools.lru_cache(maxsize=64)
def _normalization(eta: float) -> float:
    return stationary_moment(eta, normalized=False)


def stationary_purity_pdf(P: float | np.ndarray, eta: float) -> np.ndarray:
    """Normalized stationary density of the purity for 0 < η < 1."""
    eta = _check_eta(eta, allow_one=False)
    P = np.asarray(P, dtype=float)
    if np.any((P < 0) | (P >= 1)):
        raise DomainError("P must lie in [0, 1)")
    with np.errstate(over="ignore"):
        out = np.exp(_log_unnormalized(P, eta) - math.log(_normalization(eta)))
    return np.where(P == 0, 0.0, out)


def stationary_mean_radius(eta: float) -> float:
    """⟨r⟩_st = ∫ √P p_st dP."""
    return stationary_moment(eta, math.sqrt)


def stationary_mean_purity(eta: float) -> float:
    return stationary_moment(eta, lambda p: p)


def stationary_bin_probabilities(edges: Sequence[float], eta: float) -> np.ndarray:
    """Probability mass of p_st in each [edges[i], edges[i+1]) of P."""
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0) or edges[0] < 0 or edges[-1] > 1:
        raise DomainError("edges must increase within [0, 1]")
    eta = _check_eta(eta, allow_one=False)
    norm = _normalization(eta)
    out = np.empty(edges.size - 1)
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        out[i] = _mass(lo, hi, eta) / norm
    return out


def _mass(lo: float, hi: float, eta: float) -> float:
    c = (1.0 - eta) / eta

    def f(p: float) -> float:
        return math.exp(float(_log_unnormalized(np.array(p), eta))) if 0 < p < 1 else 0.0

    def tail(s: float) -> float:
        return math.sqrt(s * (1.0 + s)) * math.exp(-c * s)

    total = 0.0
    if lo < SPLIT:
        total += integrate.quad(f, lo, min(hi, SPLIT), limit=200, epsabs=0, epsrel=1e-11)[0]
    if hi > SPLIT:
        a = max(lo, SPLIT)
        s_lo = a / (1.0 - a)
        s_hi = np.inf if hi >= 1.0 else hi / (1.0 - hi)
        total += integrate.quad(tail, s_lo, s_hi, limit=200, epsabs=0, epsrel=1e-11)[0]
    return total


# ensemble purification rate ----------------------------------------------


def purity_drift(P: float | np.ndarray, eta: float, gamma0: float = GAMMA0) -> np.ndarray | float:
    """⟨dP⟩/dt = 2Γ₀[2(1 − P/η) + (1 − P)²]."""
    eta = _check_eta(eta)
    P = np.asarray(P, dtype=float)
    out = 2.0 * gamma0 * (2.0 * (1.0 - P / eta) + (1.0 - P) ** 2)
    return float(out) if out.ndim == 0 else out


def purity_diffusion(P: float | np.ndarray, gamma0: float = GAMMA0) -> np.ndarray | float:
    """B(P) = 8Γ₀ P (1 − P)²."""
    P = np.asarray(P, dtype=float)
    out = 8.0 * gamma0 * P * (1.0 - P) ** 2
    return float(out) if out.ndim == 0 else out


def stationary_root(eta: float) -> float:
    """Zero of the purification rate in [0, 1]: (1 + 1/η) − √((1 + 1/η)² − 3)."""
    eta = _check_eta(eta)
    b = 1.0 + 1.0 / eta
    return b - math.sqrt(b * b - 3.0)


def single_axis_drift(P: float, eta: float = 1.0, gamma0: float = GAMMA0) -> float:
    """Purification rate for a lone z detector, averaged over directions.

    Conditionally the rate is 2Γ₀[(x² + y²)z² + (1 − z²)²] − 2Γ(x² + y²).
    Averaging over an isotropic direction at fixed P gives
    2Γ₀(1 − 2P/3 + P²/3) − (4/3)ΓP, which at η = 1 is 2Γ₀(1 − P)(1 − P/3).
    """
    eta = _check_eta(eta)
    return 2.0 * gamma0 * (1.0 - 2.0 * P / 3.0 + P * P / 3.0) - 4.0 / 3.0 * (gamma0 / eta) * P


def naive_purity_ode(eta: float, P0: float, t_grid: Sequence[float], gamma0: float = GAMMA0) -> np.ndarray:
    """Integrate dP/dt = A(P) as if it governed ⟨P⟩."""
    eta = _check_eta(eta)
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or np.any(np.diff(t) < 0) or t[0] < 0:
        raise DomainError("t_grid must be non-empty, non-negative and increasing")
    if not (0.0 <= P0 <= 1.0):
        raise DomainError("P0 must lie in [0, 1]")
    sol = integrate.solve_ivp(
        lambda _t, y: [purity_drift(y[0], eta, gamma0)],
        (0.0, float(t[-1])),
        [float(P0)],
        t_eval=t,
        method="LSODA",
        rtol=1e-10,
        atol=1e-12,
    )
    if not sol.success:
        raise ArithmeticError(sol.message)
    return sol.y[0]


# Fokker–Planck solver ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PurityGrid:
    """Density samples p_j on uniform purity nodes at one time."""

    nodes: np.ndarray
    density: np.ndarray
    time: float
    weights: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights * self.density))

    def expect(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * g(self.nodes) * self.density))


def mean_purity(grid: PurityGrid) -> float:
    return grid.expect(lambda p: p)


def mean_radius(grid: PurityGrid) -> float:
    return grid.expect(np.sqrt)


def bernoulli(x: np.ndarray) -> np.ndarray:
    """B(x) = x/(eˣ − 1), overflow-safe on both sides."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-8
    pos = (x > 0) & ~small
    neg = (x < 0) & ~small
    out[small] = 1.0 - 0.5 * x[small]
    xp = x[pos]
    out[pos] = xp * np.exp(-xp) / -np.expm1(-xp)
    out[neg] = x[neg] / np.expm1(x[neg])
    return out


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(4)


def _cell_peclet(lo: np.ndarray, h: float, eta: float, gamma0: float) -> np.ndarray:
    """∫ v/D over each cell with v = A − B'/2, D = B/2 (4-point Gauss)."""
    total = np.zeros_like(lo)
    for x, w in zip(_GAUSS_X, _GAUSS_W):
        p = lo + 0.5 * h * (x + 1.0)
        a = 2.0 * gamma0 * (2.0 * (1.0 - p / eta) + (1.0 - p) ** 2)
        d_b = 8.0 * gamma0 * ((1.0 - p) ** 2 - 2.0 * p * (1.0 - p))
        d = 4.0 * gamma0 * p * (1.0 - p) ** 2
        total += 0.5 * h * w * (a - 0.5 * d_b) / d
    return total


def fp_operator(eta: float, n_nodes: int = 2001, gamma0: float = GAMMA0) -> tuple[np.ndarray, np.ndarray, sp.csc_matrix]:
    """Nodes, control-volume widths and the generator L with dp/dt = L p.

    Vertex-centred finite volumes with half cells at P = 0 and 1 and zero
    flux through both ends. Interior fluxes use exponential fitting,
    J = (D/h)[B(−Pe) p_j − B(Pe) p_{j+1}], which keeps L an M-matrix and
    makes the discrete steady state exact up to the Péclet quadrature.
    """
    eta = _check_eta(eta)
    if n_nodes < 3:
        raise DomainError("need at least 3 nodes")
    n = n_nodes - 1
    h = 1.0 / n
    nodes = np.linspace(0.0, 1.0, n_nodes)
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    diff = 4.0 * gamma0 * mid * (1.0 - mid) ** 2
    pe = _cell_peclet(nodes[:-1], h, eta, gamma0)
    left = diff / h * bernoulli(-pe)
    right = diff / h * bernoulli(pe)
    weights = np.full(n_nodes, h)
    weights[0] = weights[-1] = h / 2.0
    main = np.zeros(n_nodes)
    main[:-1] -= left
    main[1:] -= right
    op = sp.diags([left, main, right], [-1, 0, 1], format="csc")
    op = sp.diags(1.0 / weights) @ op
    return nodes, weights, op.tocsc()


def fp_initial(nodes: np.ndarray, weights: np.ndarray, P0: float) -> np.ndarray:
    """Unit-mass hat on the node pair bracketing P0."""
    if not (0.0 <= P0 < 1.0):
        raise DomainError("P0 must lie in [0, 1)")
    h = nodes[1] - nodes[0]
    j = min(int(P0 / h), nodes.size - 2)
    theta = (P0 - nodes[j]) / h
    p = np.zeros_like(nodes)
    p[j] = (1.0 - theta) / weights[j]
    p[j + 1] += theta / weights[j + 1]
    return p


def fp_solve(
    eta: float,
    P0: float,
    t_grid: Sequence[float],
    *,
    n_nodes: int = 2001,
    dt_max: float = 1e-3,
    gamma0: float = GAMMA0,
) -> list[PurityGrid]:
    """Evolve p(P, t) from δ(P − P0) and return snapshots at ``t_grid``.

    Backward Euler is unconditionally stable here, so there is no CFL limit;
    each output interval is split into equal sub-steps no longer than
    ``dt_max``, which bounds the time-discretization error instead.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or t[0] < 0 or np.any(np.diff(t) < 0):
        raise DomainError("t_grid must be non-empty, non-negative and increasing")
    nodes, weights, op = fp_operator(eta, n_nodes, gamma0)
    p = fp_initial(nodes, weights, P0)
    eye = sp.identity(nodes.size, format="csc")
    solvers: dict[float, Callable[[np.ndarray], np.ndarray]] = {}
    out = []
    now = 0.0
    for target in t:
        span = target - now
        if span > 0:
            steps = max(1, math.ceil(span / dt_max - 1e-9))
            step = round(span / steps, 15)
            if step not in solvers:
                solvers[step] = spla.factorized((eye - step * op).tocsc())
            for _ in range(steps):
                p = solvers[step](p)
        now = float(target)
        out.append(PurityGrid(nodes, p.copy(), now, weights))
    return out


# sphere diffusion ---------------------------------------------------------


def variance_V(tau_elapsed: float, gamma0: float = GAMMA0) -> float:
    """Angular diffusion variance V = 4Γ₀τ."""
    return 4.0 * gamma0 * tau_elapsed


def _damping(V: float, n: np.ndarray) -> np.ndarray:
    return np.exp(-n * (n + 1.0) * V / 4.0)


def legendre_order(V: float) -> int:
    """Smallest n_max whose tail Σ_{n>n_max}(2n+1)/(4π)e^{−n(n+1)V/4} < 1e-12."""
    if V <= 0:
        raise DomainError("V must be positive")
    n = 0
    while n < LEGENDRE_CAP:
        n += 1
        term = (2 * n + 1) / (4 * math.pi) * math.exp(-n * (n + 1) * V / 4.0)
        # successive terms shrink at least by the ratio q; bound the tail geometrically
        q = math.exp(-(n + 1) * V / 2.0) * (2 * n + 3) / (2 * n + 1)
        if q < 1 and term * q / (1 - q) < LEGENDRE_TOL:
            return n
    return LEGENDRE_CAP


def legendre_coefficients(tau_elapsed: float, gamma0: float = GAMMA0) -> np.ndarray:
    """c_n = (2n+1)/(4π) e^{−n(n+1)V/4}, n = 0..n_max."""
    V = variance_V(tau_elapsed, gamma0)
    n = np.arange(legendre_order(V) + 1, dtype=float)
    return (2.0 * n + 1.0) / (4.0 * math.pi) * _damping(V, n)


def sphere_diffusion_pdf(theta: float | np.ndarray, tau_elapsed: float, gamma0: float = GAMMA0) -> np.ndarray:
    """Density per solid angle of the polar angle after free sphere diffusion.

    For V < 1e-4 the series is replaced by the small-angle Gaussian
    exp(−Θ²/V), normalized on the sphere. At τ = 0 the law is a point mass at
    Θ = 0.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > math.pi)):
        raise DomainError("Θ must lie in [0, π]")
    if tau_elapsed < 0:
        raise DomainError("elapsed time must be non-negative")
    if tau_elapsed == 0:
        return np.where(theta == 0, np.inf, 0.0)
    V = variance_V(tau_elapsed, gamma0)
    if V < SMALL_V:
        return np.exp(-theta**2 / V) / _gaussian_mass(V)
    return legendre.legval(np.cos(theta), legendre_coefficients(tau_elapsed, gamma0))


@functools.lru_cache(maxsize=64)
def _gaussian_mass(V: float) -> float:
    # ∫ e^{−Θ²/V} 2π sin Θ dΘ; the integrand is negligible beyond 10√V
    return integrate.quad(lambda th: math.exp(-th * th / V) * 2.0 * math.pi * math.sin(th),
                          0.0, 10.0 * math.sqrt(V), epsabs=0.0, epsrel=1e-13)[0]


def sphere_bin_probabilities(cos_edges: Sequence[float], tau_elapsed: float, gamma0: float = GAMMA0) -> np.ndarray:
    """Probability of cos Θ in each bin, using ∫P_n dx = (P_{n+1} − P_{n−1})/(2n+1)."""
    edges = np.asarray(cos_edges, dtype=float)
    if np.any(np.diff(edges) <= 0) or edges[0] < -1 or edges[-1] > 1:
        raise DomainError("cos Θ edges must increase within [−1, 1]")
    if tau_elapsed <= 0:
        raise DomainError("elapsed time must be positive")
    V = variance_V(tau_elapsed, gamma0)
    if V < SMALL_V:
        theta = np.arccos(np.clip(edges, -1, 1))
        cdf = np.exp(-theta**2 / V)
        return np.diff(cdf)
    n_max = legendre_order(V)
    damp = _damping(V, np.arange(n_max + 1, dtype=float))
    # antiderivative F(x) = x/2 + Σ_{n≥1} ½ d_n [P_{n+1}(x) − P_{n−1}(x)]
    coef = np.zeros(n_max + 2)
    coef[1] += 0.5
    for n in range(1, n_max + 1):
        coef[n + 1] += 0.5 * damp[n]
        coef[n - 1] -= 0.5 * damp[n]
    # truncation leaves ~1e-12 noise; probabilities cannot be negative
    return np.maximum(np.diff(legendre.legval(edges, coef)), 0.0)


def theta_second_moment(tau_elapsed: float, gamma0: float = GAMMA0) -> float:
    """⟨Θ²⟩ under the sphere-diffusion law."""
    V = variance_V(tau_elapsed, gamma0)
    if V <= 0:
        return 0.0
    if V < SMALL_V:
        return V
    coef = legendre_coefficients(tau_elapsed, gamma0)
    peak = min(math.pi, 3.0 * math.sqrt(V))
    f = lambda th: th * th * legendre.legval(math.cos(th), coef) * 2.0 * math.pi * math.sin(th)
    head = integrate.quad(f, 0.0, peak, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    tail = integrate.quad(f, peak, math.pi, limit=400, epsabs=1e-13, epsrel=1e-11)[0] if peak < math.pi else 0.0
    return head + tail


# correlators --------------------------------------------------------------


def correlator_theory(
    delta_t: float | np.ndarray,
    eta: float = 1.0,
    params: DetectorParams | None = None,
    signal_axis: str | int = "z",
    state_axis: str | int = "z",
) -> np.ndarray | float:
    """⟨u_k(t − Δt) r_j(t)⟩ for the stationary ensemble.

    Same axis: (Δu_k/2) exp(−Σ_{l≠k} Γ_l Δt), which for identical detectors is
    (Δu/2) e^{−Δt/(η τ_meas)}. Different axes: 0.
    """
    dt = np.asarray(delta_t, dtype=float)
    if np.any(dt < 0):
        raise DomainError("Δt must be non-negative")
    if params is None:
        params = identical_detectors_from_eta(eta)
    k = axis_index(signal_axis)
    j = axis_index(state_axis)
    if k != j:
        out = np.zeros_like(dt)
    else:
        rate = float(np.sum(params.total_dephasing) - params.total_dephasing[k])
        out = 0.5 * params.delta_u_k[k] * np.exp(-rate * dt)
    return float(out) if out.ndim == 0 else out
