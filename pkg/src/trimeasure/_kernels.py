"""Compiled inner loops. Everything here works on plain float64 arrays.

Scheme codes: 0 = bayes, 1 = ito, 2 = stratonovich_heun.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

BAYES, ITO, HEUN = 0, 1, 2
SCHEME_CODES = {"bayes": BAYES, "ito": ITO, "stratonovich_heun": HEUN}

# above this |λ| the tanh/cosh form loses the denominator to cancellation
_LOG_BRANCH = 15.0


@njit(cache=True, inline="always")
def _kick(x, y, z, n0, n1, n2, lam, tdecay):
    rn = x * n0 + y * n1 + z * n2
    px = x - rn * n0
    py = y - rn * n1
    pz = z - rn * n2
    if abs(lam) < _LOG_BRANCH:
        # tanh and sech from a single exponential
        e = math.exp(-abs(lam))
        e2 = e * e
        t = math.copysign((1.0 - e2) / (1.0 + e2), lam)
        den = 1.0 + rn * t
        par = (t + rn) / den
        f = 2.0 * e / ((1.0 + e2) * den)
    else:
        c = min(1.0, max(-1.0, rn))
        l1 = math.log1p(c) + lam if c > -1.0 else -math.inf
        l2 = math.log1p(-c) - lam if c < 1.0 else -math.inf
        m = max(l1, l2)
        if not math.isfinite(m):
            raise ArithmeticError("both outcome likelihoods underflowed")
        norm = m + math.log(math.exp(l1 - m) + math.exp(l2 - m))
        par = math.exp(l1 - norm) - math.exp(l2 - norm)
        f = 2.0 * math.exp(-norm)
    f *= tdecay
    return par * n0 + f * px, par * n1 + f * py, par * n2 + f * pz


@njit(cache=True)
def bayes_kick(r, n, lam, tdecay):
    """Quantum Bayes update of Bloch vector ``r`` for a σ·n outcome.

    ``lam`` is the log-likelihood half-ratio ū Δu τ / S, ``tdecay`` the extra
    transverse factor e^{−γτ}.
    """
    out = np.empty(3)
    out[0], out[1], out[2] = _kick(r[0], r[1], r[2], n[0], n[1], n[2], lam, tdecay)
    return out


@njit(cache=True, inline="always")
def _strat_rhs(x, y, z, w, coupling, dephase_rates, dt):
    s = coupling[0] * x * w[0] + coupling[1] * y * w[1] + coupling[2] * z * w[2]
    return (
        coupling[0] * w[0] - x * s - dephase_rates[0] * x * dt,
        coupling[1] * w[1] - y * s - dephase_rates[1] * y * dt,
        coupling[2] * w[2] - z * s - dephase_rates[2] * z * dt,
    )


@njit(cache=True, inline="always")
def filter_step(r, w, dt, scheme, half_du, coupling, ito_rates, dephase_rates, decay, out):
    """Advance ``r`` by one fine step given the record increment ``w``.

    ``decay`` holds the per-step dephasing factors exp(−dephase_rates·dt).
    """
    if scheme == BAYES:
        vx = coupling[0] * w[0]
        vy = coupling[1] * w[1]
        vz = coupling[2] * w[2]
        lam = math.sqrt(vx * vx + vy * vy + vz * vz)
        if lam > 0.0:
            x, y, z = _kick(r[0], r[1], r[2], vx / lam, vy / lam, vz / lam, lam, 1.0)
        else:
            x, y, z = r[0], r[1], r[2]
        out[0] = x * decay[0]
        out[1] = y * decay[1]
        out[2] = z * decay[2]
    elif scheme == ITO:
        # innovation: record minus its conditional mean
        d0 = w[0] - half_du[0] * r[0] * dt
        d1 = w[1] - half_du[1] * r[1] * dt
        d2 = w[2] - half_du[2] * r[2] * dt
        s = coupling[0] * r[0] * d0 + coupling[1] * r[1] * d1 + coupling[2] * r[2] * d2
        out[0] = r[0] - ito_rates[0] * r[0] * dt + coupling[0] * d0 - r[0] * s
        out[1] = r[1] - ito_rates[1] * r[1] * dt + coupling[1] * d1 - r[1] * s
        out[2] = r[2] - ito_rates[2] * r[2] * dt + coupling[2] * d2 - r[2] * s
    else:
        a0, a1, a2 = _strat_rhs(r[0], r[1], r[2], w, coupling, dephase_rates, dt)
        b0, b1, b2 = _strat_rhs(r[0] + a0, r[1] + a1, r[2] + a2, w, coupling, dephase_rates, dt)
        out[0] = r[0] + 0.5 * (a0 + b0)
        out[1] = r[1] + 0.5 * (a1 + b1)
        out[2] = r[2] + 0.5 * (a2 + b2)


@njit(cache=True, inline="always")
def _clamp(r, limit):
    norm = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    if norm > 1.0:
        if norm - 1.0 > limit:
            return False
        r[0] /= norm
        r[1] /= norm
        r[2] /= norm
    return True


@njit(cache=True)
def simulate_path(r0, dw, dt, scheme, half_du, coupling, ito_rates, dephase_rates, limit):
    """Integrate the true state and emit the record it produces.

    Returns (states[n+1, 3], record[n, 3], failed_step or -1).
    """
    n = dw.shape[0]
    states = np.empty((n + 1, 3))
    record = np.empty((n, 3))
    r = r0.copy()
    states[0] = r
    nxt = np.empty(3)
    decay = np.exp(-dephase_rates * dt)
    for m in range(n):
        for k in range(3):
            record[m, k] = half_du[k] * r[k] * dt + dw[m, k]
        filter_step(r, record[m], dt, scheme, half_du, coupling, ito_rates, dephase_rates, decay, nxt)
        if not _clamp(nxt, limit):
            states[m + 1] = nxt
            return states[: m + 2], record[: m + 1], m
        r[:] = nxt
        states[m + 1] = r
    return states, record, -1


@njit(cache=True)
def replay_path(r0, record, dt, scheme, half_du, coupling, ito_rates, dephase_rates, limit):
    """Filter a stored record from ``r0``. Returns (states[n+1, 3], failed_step or -1)."""
    n = record.shape[0]
    states = np.empty((n + 1, 3))
    r = r0.copy()
    states[0] = r
    nxt = np.empty(3)
    decay = np.exp(-dephase_rates * dt)
    for m in range(n):
        filter_step(r, record[m], dt, scheme, half_du, coupling, ito_rates, dephase_rates, decay, nxt)
        if not _clamp(nxt, limit):
            states[m + 1] = nxt
            return states[: m + 2], m
        r[:] = nxt
        states[m + 1] = r
    return states, -1


@njit(cache=True, inline="always")
def _radial_step(r, xi, dt, gamma0, eta, coupling):
    b = r - 2.0 * gamma0 * r / eta * dt + coupling * (1.0 - r * r) * xi
    # r' = b + 2Γ₀ dt / r'  (positive root)
    r = 0.5 * (b + math.sqrt(b * b + 8.0 * gamma0 * dt))
    return 1.0 if r > 1.0 else r


@njit(cache=True)
def radial_paths(r0, xi, dt, gamma0, eta, coupling):
    """Radial Itô equation with the singular 2Γ₀/r drift taken implicitly.

    ``xi`` has shape (paths, steps) and holds noise increments ξ_r dt.
    Returns the final radius of every path.
    """
    n_paths, n_steps = xi.shape
    out = np.empty(n_paths)
    for p in range(n_paths):
        r = r0
        for m in range(n_steps):
            r = _radial_step(r, xi[p, m], dt, gamma0, eta, coupling)
        out[p] = r
    return out


@njit(cache=True)
def radial_samples(r0, xi, dt, gamma0, eta, coupling, burn_steps, every):
    """Radii of one long path after ``burn_steps`` and then every ``every`` steps."""
    n_out = (xi.shape[0] - burn_steps) // every
    out = np.empty(n_out)
    r = r0
    k = 0
    for m in range(xi.shape[0]):
        r = _radial_step(r, xi[m], dt, gamma0, eta, coupling)
        done = m + 1 - burn_steps
        if done > 0 and done % every == 0 and k < n_out:
            out[k] = r
            k += 1
    return out


@njit(cache=True)
def exp_window(record, dt, tau):
    """One-pole smoothing ũ_m = α ũ_{m−1} + (1 − α) w_m/dt, started from zero."""
    n = record.shape[0]
    alpha = math.exp(-dt / tau)
    out = np.empty((n, 3))
    u0 = 0.0
    u1 = 0.0
    u2 = 0.0
    for m in range(n):
        u0 = alpha * u0 + (1.0 - alpha) * record[m, 0] / dt
        u1 = alpha * u1 + (1.0 - alpha) * record[m, 1] / dt
        u2 = alpha * u2 + (1.0 - alpha) * record[m, 2] / dt
        out[m, 0] = u0
        out[m, 1] = u1
        out[m, 2] = u2
    return out


@njit(cache=True)
def window_scores(states, record, dt, tau, kind, start):
    """Fused window estimate + scoring for one trajectory.

    ``kind`` 0 = rectangular, 1 = exponential. Scores the estimate formed
    after increment m against states[m + 1] for every m + 1 ≥ start.
    Returns (Σ r·r_est, Σ cos φ, Σ |r|, count).
    """
    n = record.shape[0]
    width = int(round(tau / dt))
    alpha = math.exp(-dt / tau)
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    e0 = 0.0
    e1 = 0.0
    e2 = 1.0
    sum_dot = 0.0
    sum_cos = 0.0
    sum_r = 0.0
    count = 0
    for m in range(n):
        if kind == 0:
            s0 += record[m, 0]
            s1 += record[m, 1]
            s2 += record[m, 2]
            if m >= width:
                s0 -= record[m - width, 0]
                s1 -= record[m - width, 1]
                s2 -= record[m - width, 2]
        else:
            s0 = alpha * s0 + (1.0 - alpha) * record[m, 0]
            s1 = alpha * s1 + (1.0 - alpha) * record[m, 1]
            s2 = alpha * s2 + (1.0 - alpha) * record[m, 2]
        norm = math.sqrt(s0 * s0 + s1 * s1 + s2 * s2)
        if norm > 0.0:
            e0 = s0 / norm
            e1 = s1 / norm
            e2 = s2 / norm
        if m + 1 >= start:
            x = states[m + 1, 0]
            y = states[m + 1, 1]
            z = states[m + 1, 2]
            dot = x * e0 + y * e1 + z * e2
            rr = math.sqrt(x * x + y * y + z * z)
            sum_dot += dot
            if rr > 0.0:
                sum_cos += dot / rr
            sum_r += rr
            count += 1
    return sum_dot, sum_cos, sum_r, count


@njit(cache=True)
def discrete_estimates(bins, bin_width, algorithm, r0, coupling, delta_u, noise_s, order):
    """Run Algorithm 1-4 over bin-averaged outputs ``bins[n, 3]``.

    Algorithms 1-3 are recursive and start from ``r0``; Algorithm 4 starts
    from ``r0`` only for the (measure-zero) zero-vector hold.
    """
    nb = bins.shape[0]
    out = np.empty((nb, 3))
    r = r0.copy()
    scale = delta_u * bin_width / noise_s
    axis = np.zeros(3)
    for j in range(nb):
        u = bins[j]
        un = math.sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
        if algorithm == 1:
            if un > 0.0:
                n = u / un
                r = bayes_kick(r, n, un * scale, 1.0)
        elif algorithm == 2:
            along = u[0] * r[0] + u[1] * r[1] + u[2] * r[2]
            p = u - along * r
            pn = math.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
            if pn > 0.0:
                phi = coupling * pn * bin_width
                r = r * math.cos(phi) + (p / pn) * math.sin(phi)
        elif algorithm == 3:
            for q in range(3):
                k = order[q]
                axis[:] = 0.0
                axis[k] = 1.0
                r = bayes_kick(r, axis, u[k] * scale, 1.0)
        else:
            if un > 0.0:
                r = u / un
        out[j] = r
    return out


@njit(cache=True)
def lagged_correlation(signal, target, dt, lag, start):
    """Mean of (signal[m]/dt)·target[m + 1 + lag] over m ≥ start."""
    n = signal.shape[0]
    total = 0.0
    count = 0
    for m in range(start, n):
        idx = m + 1 + lag
        if idx >= target.shape[0]:
            break
        total += signal[m] / dt * target[idx]
        count += 1
    return total / count if count > 0 else math.nan


@njit(cache=True)
def purification_increments(states, dw, coupling):
    """Zero-mean control variate Σ_m 2 r_m·G(r_m) dw_m for purity increments.

    G is the Itô diffusion matrix a_i δ_ik − r_i a_k r_k; the sum is a
    martingale increment because dw_m is independent of r_m.
    """
    total = 0.0
    for m in range(dw.shape[0]):
        r = states[m]
        s = coupling[0] * r[0] * dw[m, 0] + coupling[1] * r[1] * dw[m, 1] + coupling[2] * r[2] * dw[m, 2]
        rr = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
        total += 2.0 * (s - rr * s)
    return total
