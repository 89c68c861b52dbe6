"""Experiment recipes: seeded ensembles, error bars and CSV tables.

An experiment is a strict JSON document

    {"kind": "fig3_window_fidelity",
     "sweep": {"eta": [1.0], "tau": [0.3, 0.6, 0.9]},
     "simulation": {"total_time": 600, "dt": 0.001, "seed": 7, "ensemble_size": 200},
     "burn_in": 20,
     "output": "out/fig3"}

Omitted keys take per-kind defaults. Sweep point ``i`` and trajectory ``j``
key the noise stream (seed, i, j), so any single point can be rerun alone.
Every table is a function of the spec only; wall-clock and worker count go
to a separate metadata file.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
import warnings
from concurrent.futures import Executor, ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy import optimize, stats

from . import _kernels as K
from . import analytics
from .core_model import (
    SCHEMES,
    DetectorParams,
    QubitState,
    SimulationConfig,
    identical_detectors_from_eta,
    single_z_detector,
)
from .errors import ConfigError, PhysicalityError
from .estimators import WINDOW_KINDS
from .noise import aux_generator, noise_block, noise_generator, random_direction
from .sde_engine import EngineArrays, bin_factor, bin_samples, overshoot_limit, run_ensemble, simulate_arrays

KINDS = (
    "fig2_purity",
    "fig3_window_fidelity",
    "fig4_discrete_algorithms",
    "correlator_check",
    "sphere_diffusion_check",
    "purification_rate",
    "custom",
)
QUICK_FACTOR = 20
SLOPE_RANGE = (0.02, 0.3)
FIG4_DELTA_T = [0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.5, 0.7, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0]

_DEFAULTS: dict[str, dict[str, Any]] = {
    "fig2_purity": {
        "sweep": {"eta": [1.0, 0.5, 0.1], "times": [0.25 * i for i in range(81)]},
        "simulation": {"dt": 1e-3, "ensemble_size": 10_000},
        "burn_in": 0.0,
    },
    "fig3_window_fidelity": {
        "sweep": {
            "eta": [1.0, 0.5, 0.1],
            "tau": [float(x) for x in np.geomspace(0.05, 5.0, 24)],
            "windows": list(WINDOW_KINDS),
        },
        "simulation": {"dt": 1e-3, "ensemble_size": 200, "total_time": 600.0},
        "burn_in": 20.0,
    },
    "fig4_discrete_algorithms": {
        "sweep": {"eta": [1.0], "delta_t": FIG4_DELTA_T, "algorithms": [1, 2, 3, 4]},
        "simulation": {"dt": 1e-3, "ensemble_size": 200, "total_time": 600.0},
        "burn_in": 20.0,
    },
    "correlator_check": {
        "sweep": {"eta": [1.0, 0.5], "lag": [0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0]},
        "simulation": {"dt": 1e-3, "ensemble_size": 200, "total_time": 100.0},
        "burn_in": 0.0,
    },
    "sphere_diffusion_check": {
        "sweep": {"tau": [0.05, 0.25, 1.0, 5.0], "bins": 20},
        "simulation": {"dt": 1e-3, "ensemble_size": 10_000},
        "burn_in": 0.0,
    },
    "purification_rate": {
        "sweep": {"eta": [1.0], "purity": [0.5], "horizon": 0.01},
        "simulation": {"dt": 1e-4, "ensemble_size": 40_000},
        "burn_in": 0.0,
    },
    "custom": {
        "sweep": {"times": None},
        "simulation": {},
        "burn_in": 0.0,
    },
}
_SIM_KEYS = {"total_time", "dt", "seed", "scheme", "ensemble_size"}
_DERIVED_TOTAL = {"fig2_purity", "sphere_diffusion_check", "purification_rate", "custom"}


# spec --------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Validated experiment description with every default filled in."""

    kind: str
    sweep: dict[str, Any]
    dt: float
    seed: int
    scheme: str
    ensemble_size: int
    total_time: float | None
    burn_in: float
    output: str
    config: SimulationConfig | None = None
    dump_trajectories: int = 0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentSpec:
        if not isinstance(data, dict):
            raise ConfigError("experiment spec must be a JSON object")
        allowed = {"kind", "sweep", "simulation", "burn_in", "output", "config", "dump_trajectories"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in experiment spec: {sorted(unknown)}")
        kind = data.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
        defaults = copy.deepcopy(_DEFAULTS[kind])

        sweep_in = data.get("sweep", {})
        if not isinstance(sweep_in, dict):
            raise ConfigError("sweep must be an object")
        bad = set(sweep_in) - set(defaults["sweep"])
        if bad:
            raise ConfigError(f"sweep keys {sorted(bad)} do not apply to {kind}; allowed {sorted(defaults['sweep'])}")
        sweep = {**defaults["sweep"], **sweep_in}

        sim_in = data.get("simulation", {})
        if not isinstance(sim_in, dict):
            raise ConfigError("simulation must be an object")
        bad = set(sim_in) - _SIM_KEYS
        if bad:
            raise ConfigError(f"unknown simulation keys: {sorted(bad)}")
        if kind in _DERIVED_TOTAL and "total_time" in sim_in:
            raise ConfigError(f"{kind} derives total_time from its sweep; drop simulation.total_time")
        if kind == "custom" and sim_in:
            raise ConfigError("custom experiments take their settings from 'config'")
        sim = {**defaults["simulation"], **sim_in}

        config = None
        if kind == "custom":
            if "config" not in data:
                raise ConfigError("custom experiments need a 'config' SimulationConfig object")
            config = SimulationConfig.from_dict(data["config"])
            sim = {
                "dt": config.dt,
                "seed": config.seed,
                "scheme": config.scheme,
                "ensemble_size": config.ensemble_size,
                "total_time": config.total_time,
            }
            if sweep["times"] is None:
                sweep["times"] = [config.total_time * i / 10 for i in range(11)]
        elif "config" in data:
            raise ConfigError("'config' applies only to custom experiments")

        dump = data.get("dump_trajectories", 0)
        if isinstance(dump, bool) or not isinstance(dump, int) or dump < 0:
            raise ConfigError("dump_trajectories must be a non-negative integer")

        burn_in = data.get("burn_in", defaults["burn_in"])
        if isinstance(burn_in, bool) or not isinstance(burn_in, (int, float)) or burn_in < 0:
            raise ConfigError("burn_in must be a non-negative number")
        output = data.get("output", kind)
        if not isinstance(output, str) or not output:
            raise ConfigError("output must be a non-empty path prefix")

        seed = sim.get("seed", 0)
        scheme = sim.get("scheme", "bayes")
        ensemble = sim.get("ensemble_size")
        dt = sim.get("dt")
        for name, value in (("seed", seed), ("ensemble_size", ensemble)):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"simulation.{name} must be an integer")
        if ensemble < 1:
            raise ConfigError("ensemble_size must be ≥ 1")
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if isinstance(dt, bool) or not isinstance(dt, (int, float)) or not dt > 0:
            raise ConfigError("simulation.dt must be a positive number")
        total = sim.get("total_time")
        spec = cls(
            kind=kind,
            sweep=_check_sweep(kind, sweep, float(dt)),
            dt=float(dt),
            seed=seed,
            scheme=scheme,
            ensemble_size=ensemble,
            total_time=None if total is None else float(total),
            burn_in=float(burn_in),
            output=output,
            config=config,
            dump_trajectories=dump,
        )
        spec._check_durations()
        return spec

    @classmethod
    def from_json(cls, text: str | Path) -> ExperimentSpec:
        if isinstance(text, Path):
            text = text.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def _check_durations(self) -> None:
        if self.kind in ("fig3_window_fidelity", "fig4_discrete_algorithms", "correlator_check"):
            assert self.total_time is not None
            widest = max(self.sweep.get("tau", self.sweep.get("delta_t", self.sweep.get("lag", [0.0]))))
            burn = max(self.burn_in, 10.0 * widest) if self.kind != "correlator_check" else self.burn_in
            if self.total_time <= burn + widest:
                raise ConfigError(
                    f"total_time {self.total_time} leaves no scored samples after burn-in {burn}"
                )
            bin_factor(self.total_time, self.dt)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind,
            "sweep": self.sweep,
            "simulation": {
                "dt": self.dt,
                "seed": self.seed,
                "scheme": self.scheme,
                "ensemble_size": self.ensemble_size,
            },
            "burn_in": self.burn_in,
            "output": self.output,
        }
        if self.total_time is not None and self.kind not in _DERIVED_TOTAL:
            out["simulation"]["total_time"] = self.total_time
        if self.config is not None:
            out["config"] = self.config.to_dict()
            del out["simulation"]
        if self.dump_trajectories:
            out["dump_trajectories"] = self.dump_trajectories
        return out

    def replace(self, **changes: Any) -> ExperimentSpec:
        data = {**self.__dict__, **changes}
        return ExperimentSpec(**data)

    def quick(self) -> ExperimentSpec:
        """Same experiment with the trajectory budget divided by ``QUICK_FACTOR``."""
        n = max(2, self.ensemble_size // QUICK_FACTOR)
        config = None
        if self.config is not None:
            config = SimulationConfig(**{**self.config.__dict__, "ensemble_size": n})
        return self.replace(ensemble_size=n, config=config)

    def with_seed(self, seed: int) -> ExperimentSpec:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        config = None
        if self.config is not None:
            config = SimulationConfig(**{**self.config.__dict__, "seed": seed})
        return self.replace(seed=seed, config=config)

    def budget_steps(self) -> int:
        """Fine steps the run will integrate, summed over sweep points."""
        n = self.ensemble_size
        if self.kind == "fig2_purity":
            return len(self.sweep["eta"]) * n * _steps(max(self.sweep["times"]), self.dt)
        if self.kind == "sphere_diffusion_check":
            return n * _steps(max(self.sweep["tau"]), self.dt)
        if self.kind == "purification_rate":
            points = 2 * len(self.sweep["eta"]) * len(self.sweep["purity"])
            return points * n * _steps(2 * self.sweep["horizon"], self.dt)
        if self.kind == "custom":
            return n * _steps(self.total_time or 0.0, self.dt)
        return len(self.sweep["eta"]) * n * _steps(self.total_time or 0.0, self.dt)


def _steps(t: float, dt: float) -> int:
    return int(round(t / dt))


def _real_list(name: str, values: Any, *, positive: bool = False, nonneg: bool = False) -> list[float]:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"sweep.{name} must be a non-empty list")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"sweep.{name} entries must be finite numbers, got {v!r}")
        if positive and v <= 0:
            raise ConfigError(f"sweep.{name} entries must be positive")
        if nonneg and v < 0:
            raise ConfigError(f"sweep.{name} entries must be non-negative")
        out.append(float(v))
    return out


def _on_grid(name: str, values: list[float], dt: float, *, snap: bool = False) -> list[float]:
    """Values as multiples of dt; ``snap`` rounds instead of rejecting."""
    out = []
    for v in values:
        k = v / dt
        if snap:
            out.append(max(1, round(k)) * dt)
        elif abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ConfigError(f"sweep.{name} value {v} is not a multiple of dt = {dt}")
        else:
            out.append(round(k) * dt)
    return out


def _check_sweep(kind: str, sweep: dict[str, Any], dt: float) -> dict[str, Any]:
    out = dict(sweep)
    if "eta" in out:
        out["eta"] = _real_list("eta", out["eta"], positive=True)
        if any(e > 1 for e in out["eta"]):
            raise ConfigError("sweep.eta entries must lie in (0, 1]")
    if "times" in out:
        times = _on_grid("times", _real_list("times", out["times"], nonneg=True), dt)
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("sweep.times must be non-decreasing")
        out["times"] = times
    if "tau" in out:
        taus = _real_list("tau", out["tau"], positive=True)
        # fig3 windows are snapped to the fine grid so both kinds share τ
        out["tau"] = _on_grid("tau", taus, dt, snap=kind == "fig3_window_fidelity")
    if "delta_t" in out:
        out["delta_t"] = _on_grid("delta_t", _real_list("delta_t", out["delta_t"], positive=True), dt)
    if "lag" in out:
        out["lag"] = _on_grid("lag", _real_list("lag", out["lag"], nonneg=True), dt)
    if "purity" in out:
        ps = _real_list("purity", out["purity"], nonneg=True)
        if any(p >= 1 for p in ps):
            raise ConfigError("sweep.purity entries must lie in [0, 1)")
        out["purity"] = ps
    if "horizon" in out:
        h = out["horizon"]
        if isinstance(h, bool) or not isinstance(h, (int, float)) or h <= 0:
            raise ConfigError("sweep.horizon must be a positive number")
        out["horizon"] = _on_grid("horizon", [float(h)], dt)[0]
    if "windows" in out:
        w = out["windows"]
        if not isinstance(w, list) or not w or any(x not in WINDOW_KINDS for x in w):
            raise ConfigError(f"sweep.windows must be a non-empty list drawn from {WINDOW_KINDS}")
    if "algorithms" in out:
        a = out["algorithms"]
        if not isinstance(a, list) or not a or any(x not in (1, 2, 3, 4) or isinstance(x, bool) for x in a):
            raise ConfigError("sweep.algorithms must be a non-empty list drawn from 1..4")
    if "bins" in out:
        b = out["bins"]
        if isinstance(b, bool) or not isinstance(b, int) or b < 2:
            raise ConfigError("sweep.bins must be an integer ≥ 2")
    return out


# tables & statistics -------------------------------------------------------


@dataclass(frozen=True)
class EnsembleStats:
    """Mean over independent trajectories with its standard error."""

    estimate: float
    stderr: float
    count: int

    @classmethod
    def from_samples(cls, values: Sequence[float] | np.ndarray) -> EnsembleStats:
        mean, err = mean_stderr(np.asarray(values, dtype=float))
        return cls(float(mean), float(err), int(np.size(values)))


def mean_stderr(values: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std/√N along ``axis`` (the trajectory axis)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    mean = np.sum(values, axis=axis) / n
    if n < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, np.std(values, axis=axis, ddof=1) / math.sqrt(n)


@dataclass
class Table:
    columns: list[str]
    rows: list[tuple[Any, ...]] = field(default_factory=list)

    def add(self, *row: Any) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} values for {len(self.columns)} columns")
        self.rows.append(tuple(row))

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def select(self, **match: Any) -> Table:
        idx = {k: self.columns.index(k) for k in match}
        keep = [r for r in self.rows if all(_same(r[i], match[k]) for k, i in idx.items())]
        return Table(list(self.columns), keep)

    def records(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, r)) for r in self.rows]


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(float(a), float(b), rel_tol=1e-9, abs_tol=1e-12)
    return a == b


def format_value(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path: Path, table: Table) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([format_value(v) for v in row])


@dataclass
class RunResult:
    spec: ExperimentSpec
    tables: dict[str, Table]
    diagnostics: list[str] = field(default_factory=list)
    dumps: dict[str, Table] = field(default_factory=dict)

    def write(self, prefix: str | Path, meta: dict[str, Any]) -> list[Path]:
        prefix = Path(prefix)
        written = []
        for name, table in {**self.tables, **self.dumps}.items():
            path = prefix.parent / f"{prefix.name}_{name}.csv"
            write_csv(path, table)
            written.append(path)
        meta_path = prefix.parent / f"{prefix.name}_meta.json"
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        meta_path.write_text(json.dumps({**meta, "diagnostics": self.diagnostics}, indent=2, sort_keys=True) + "\n")
        written.append(meta_path)
        return written


# reducers (module level so worker processes can unpickle them) -------------


def _purity_at(states: np.ndarray, record: np.ndarray, dw: np.ndarray, j: int, idx: np.ndarray) -> np.ndarray:
    s = states[idx]
    return np.minimum(np.einsum("ij,ij->i", s, s), 1.0)


def _window_scores(states, record, dw, j, taus, codes, burn_in, dt) -> np.ndarray:
    out = np.empty((len(codes), len(taus), 3))
    for a, code in enumerate(codes):
        for b, tau in enumerate(taus):
            start = int(math.ceil(max(burn_in, 10.0 * tau) / dt - 1e-9))
            s_dot, s_cos, s_r, count = K.window_scores(states, record, dt, tau, code, start)
            out[a, b] = (s_dot / count, s_cos / count, s_r / count)
    return out


def _discrete_scores(states, record, dw, j, delta_ts, algorithms, burn_in, dt, seed, point, params) -> np.ndarray:
    start = random_direction(aux_generator(seed, j, point))
    a = float(params.coupling[0])
    du, s = params.delta_u_k[0], params.s_k[0]
    order = np.array([0, 1, 2], dtype=np.int64)
    out = np.empty((len(algorithms), len(delta_ts)))
    for b, width in enumerate(delta_ts):
        k = bin_factor(width, dt)
        bins = bin_samples(record, k, dt)
        nb = bins.shape[0]
        first = int(math.ceil(max(burn_in, 10.0 * width) / width - 1e-9))
        truth = states[k * np.arange(first, nb + 1)]
        for c, alg in enumerate(algorithms):
            est = K.discrete_estimates(bins, k * dt, alg, start, a, du, s, order)
            out[c, b] = np.mean(np.einsum("ij,ij->i", truth, est[first - 1:]))
    return out


def _correlations(states, record, dw, j, lags, dt, burn_in) -> np.ndarray:
    start = int(round(burn_in / dt))
    out = np.empty((len(lags), 3))
    signal = np.ascontiguousarray(record[:, 2])
    for b, lag in enumerate(lags):
        k = int(round(lag / dt))
        for axis in range(3):
            out[b, axis] = K.lagged_correlation(signal, np.ascontiguousarray(states[:, axis]), dt, k, start)
    return out


def _polar(states, record, dw, j, idx) -> tuple[np.ndarray, float]:
    s = states[idx]
    radius = np.sqrt(np.einsum("ij,ij->i", s, s))
    p_min = float(np.min(np.einsum("ij,ij->i", states, states)))
    return s[:, 2] / radius, p_min


def _moments(states, record, dw, j, idx) -> np.ndarray:
    s = states[idx]
    p = np.einsum("ij,ij->i", s, s)
    return np.column_stack([s, p, np.sqrt(p)])


# recipes -----------------------------------------------------------------


def _config(spec: ExperimentSpec, params: DetectorParams, start: Sequence[float], total: float) -> SimulationConfig:
    return SimulationConfig(
        params=params,
        initial_state=QubitState.from_array(start),
        total_time=total,
        dt=spec.dt,
        seed=spec.seed,
        scheme=spec.scheme,
        ensemble_size=spec.ensemble_size,
    )


def run_fig2(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Mean purity from the fully mixed state: FP solver, Monte Carlo and naive ODE."""
    times = np.asarray(spec.sweep["times"])
    idx = np.rint(times / spec.dt).astype(int)
    total = float(times[-1]) if times[-1] > 0 else spec.dt
    table = Table(["eta", "t", "P_fp", "P_mc", "P_mc_stderr", "r_fp", "r_mc", "r_mc_stderr", "P_naive"])
    diagnostics = []
    for point, eta in enumerate(spec.sweep["eta"]):
        grids = analytics.fp_solve(eta, 0.0, times)
        naive = analytics.naive_purity_ode(eta, 0.0, times)
        config = _config(spec, identical_detectors_from_eta(eta), (0.0, 0.0, 0.0), total)
        purities = np.array(run_ensemble(config, partial(_purity_at, idx=idx), point=point, executor=executor))
        p_mean, p_err = mean_stderr(purities)
        r_mean, r_err = mean_stderr(np.sqrt(purities))
        for m, t in enumerate(times):
            table.add(eta, t, analytics.mean_purity(grids[m]), p_mean[m], p_err[m],
                      analytics.mean_radius(grids[m]), r_mean[m], r_err[m], naive[m])
        gap = max(abs(analytics.mean_purity(g) - p) for g, p in zip(grids, p_mean))
        diagnostics.append(f"eta={eta:g}: max |<P>_FP - <P>_MC| = {gap:.4g}")
    return RunResult(spec, {"fig2": table}, diagnostics)


def _parabolic_peak(x: np.ndarray, y: np.ndarray) -> tuple[float, float, int]:
    """Vertex of the parabola through the argmax and its neighbours (x in log space)."""
    i = int(np.argmax(y))
    if i == 0 or i == len(y) - 1:
        return float(x[i]), float(y[i]), i
    lx = np.log(x[i - 1:i + 2])
    c2, c1, c0 = np.polyfit(lx, y[i - 1:i + 2], 2)
    if c2 >= 0:
        return float(x[i]), float(y[i]), i
    v = -c1 / (2 * c2)
    return float(math.exp(v)), float(c0 + c1 * v + c2 * v * v), i


def _unimodal(y: np.ndarray, err: np.ndarray) -> bool:
    i = int(np.argmax(y))
    tol = 2.0 * np.nan_to_num(err, nan=0.0)
    rising = all(y[k + 1] >= y[k] - tol[k] - tol[k + 1] for k in range(i))
    falling = all(y[k + 1] <= y[k] + tol[k] + tol[k + 1] for k in range(i, len(y) - 1))
    return rising and falling


def run_fig3(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Running-window fidelity versus τ for each η and window kind."""
    taus = np.asarray(spec.sweep["tau"])
    kinds = spec.sweep["windows"]
    codes = [WINDOW_KINDS.index(k) for k in kinds]
    assert spec.total_time is not None
    table = Table(["eta", "kind", "tau", "F", "F_stderr", "r_cos_product", "r_cos_product_stderr",
                   "r_mean", "r_mean_stderr", "r_stationary"])
    peaks = Table(["eta", "kind", "tau_peak", "F_peak", "F_peak_stderr", "tau_argmax", "F_argmax"])
    radius = Table(["eta", "r_mc", "r_mc_stderr", "r_stationary"])
    diagnostics = []
    for point, eta in enumerate(spec.sweep["eta"]):
        config = _config(spec, identical_detectors_from_eta(eta), (0.0, 0.0, 1.0), spec.total_time)
        reducer = partial(_window_scores, taus=taus, codes=codes, burn_in=spec.burn_in, dt=spec.dt)
        scores = np.array(run_ensemble(config, reducer, point=point, executor=executor))
        r_bound = analytics.stationary_mean_radius(eta)
        f_mean, f_err = mean_stderr(scores[..., 0])
        c_mean, c_err = mean_stderr(scores[..., 1])
        r_mean, r_err = mean_stderr(scores[..., 2])
        n = scores.shape[0]
        for a, kind in enumerate(kinds):
            for b, tau in enumerate(taus):
                rc = r_mean[a, b] * c_mean[a, b]
                cov = np.cov(scores[:, a, b, 2], scores[:, a, b, 1])[0, 1] if n > 1 else np.nan
                var = (c_mean[a, b] ** 2 * r_err[a, b] ** 2 + r_mean[a, b] ** 2 * c_err[a, b] ** 2
                       + 2 * r_mean[a, b] * c_mean[a, b] * cov / n)
                table.add(eta, kind, tau, f_mean[a, b], f_err[a, b], rc, math.sqrt(max(var, 0.0)),
                          r_mean[a, b], r_err[a, b], r_bound)
            tau_pk, f_pk, i = _parabolic_peak(taus, f_mean[a])
            peaks.add(eta, kind, tau_pk, f_pk, f_err[a, i], taus[i], f_mean[a, i])
            if not _unimodal(f_mean[a], f_err[a]):
                diagnostics.append(f"warning: eta={eta:g} {kind} fidelity curve is not unimodal within 2 stderr")
        # ⟨r⟩ does not depend on the window; take the longest burn-in column
        r_all = scores[:, 0, -1, 2]
        r_m, r_e = mean_stderr(r_all)
        radius.add(eta, float(r_m), float(r_e), r_bound)
    return RunResult(spec, {"fig3": table, "fig3_peaks": peaks, "fig3_radius": radius}, diagnostics)


def _slope_fits(delta_ts: np.ndarray, per_traj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory least-squares (slope, intercept) on the small-Δt range."""
    mask = (delta_ts >= SLOPE_RANGE[0] - 1e-12) & (delta_ts <= SLOPE_RANGE[1] + 1e-12)
    x = delta_ts[mask]
    if x.size < 2:
        return np.full(per_traj.shape[0], np.nan), np.full(per_traj.shape[0], np.nan)
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, per_traj[:, mask].T, rcond=None)
    return coef[0], coef[1]


def run_fig4(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Fidelity of Algorithms 1-4 versus bin width Δt."""
    delta_ts = np.asarray(spec.sweep["delta_t"])
    algorithms = spec.sweep["algorithms"]
    assert spec.total_time is not None
    table = Table(["eta", "algorithm", "delta_t", "F", "F_stderr"])
    fits = Table(["eta", "algorithm", "slope", "slope_stderr", "intercept", "intercept_stderr", "n_points"])
    n_fit = int(np.sum((delta_ts >= SLOPE_RANGE[0] - 1e-12) & (delta_ts <= SLOPE_RANGE[1] + 1e-12)))
    diagnostics = []
    for point, eta in enumerate(spec.sweep["eta"]):
        params = identical_detectors_from_eta(eta)
        config = _config(spec, params, (0.0, 0.0, 1.0), spec.total_time)
        reducer = partial(_discrete_scores, delta_ts=delta_ts, algorithms=algorithms, burn_in=spec.burn_in,
                          dt=spec.dt, seed=spec.seed, point=point, params=params.ideal())
        scores = np.array(run_ensemble(config, reducer, point=point, executor=executor))
        f_mean, f_err = mean_stderr(scores)
        for c, alg in enumerate(algorithms):
            for b, width in enumerate(delta_ts):
                table.add(eta, alg, width, f_mean[c, b], f_err[c, b])
            slope, icpt = _slope_fits(delta_ts, scores[:, c, :])
            s_m, s_e = mean_stderr(slope)
            i_m, i_e = mean_stderr(icpt)
            fits.add(eta, alg, float(s_m), float(s_e), float(i_m), float(i_e), n_fit)
        if 4 in algorithms:
            c4 = algorithms.index(4)
            for b, width in enumerate(delta_ts):
                others = [f_mean[c, b] for c, a in enumerate(algorithms) if a != 4]
                if others and width >= 1.5 and f_mean[c4, b] < max(others) - 2 * f_err[c4, b]:
                    diagnostics.append(f"eta={eta:g} Δt={width:g}: Algorithm 4 is not the best")
    return RunResult(spec, {"fig4": table, "fig4_fit": fits}, diagnostics)


def run_correlator_check(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Monte Carlo ⟨u_z(t − Δt) r_j(t)⟩ against the closed form."""
    lags = np.asarray(spec.sweep["lag"])
    assert spec.total_time is not None
    table = Table(["eta", "lag", "signal_axis", "state_axis", "mc", "mc_stderr", "theory", "z_score"])
    fits = Table(["eta", "amplitude", "amplitude_stderr", "decay_time", "decay_time_stderr", "decay_time_theory"])
    for point, eta in enumerate(spec.sweep["eta"]):
        params = identical_detectors_from_eta(eta)
        config = _config(spec, params, (0.0, 0.0, 1.0), spec.total_time)
        reducer = partial(_correlations, lags=lags, dt=spec.dt, burn_in=spec.burn_in)
        values = np.array(run_ensemble(config, reducer, point=point, executor=executor))
        mean, err = mean_stderr(values)
        for b, lag in enumerate(lags):
            for axis, name in enumerate("xyz"):
                theory = analytics.correlator_theory(lag, eta, params, "z", name)
                z = (mean[b, axis] - theory) / err[b, axis] if err[b, axis] > 0 else np.nan
                table.add(eta, lag, "z", name, mean[b, axis], err[b, axis], theory, z)
        fits.add(eta, *_decay_fit(lags, mean[:, 2], err[:, 2]), eta * float(params.tau_meas[2]))
    return RunResult(spec, {"correlator": table, "correlator_fit": fits})


def _decay_fit(lags: np.ndarray, y: np.ndarray, err: np.ndarray) -> tuple[float, float, float, float]:
    if lags.size < 2 or not np.all(np.isfinite(err)) or np.any(err <= 0):
        return (np.nan,) * 4  # type: ignore[return-value]
    model = lambda t, amp, tc: amp * np.exp(-t / tc)
    popt, pcov = optimize.curve_fit(model, lags, y, p0=(y[0], 1.0), sigma=err, absolute_sigma=True)
    perr = np.sqrt(np.diag(pcov))
    return float(popt[0]), float(perr[0]), float(popt[1]), float(perr[1])


def _merged_chi2(observed: np.ndarray, expected: np.ndarray, minimum: float = 5.0) -> tuple[float, int]:
    """Pearson χ² after merging adjacent bins until each expects ≥ ``minimum``."""
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= minimum:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if exp:
            obs[-1] += o_acc
            exp[-1] += e_acc
        else:
            obs.append(o_acc)
            exp.append(e_acc)
    o_arr, e_arr = np.array(obs), np.array(exp)
    return float(np.sum((o_arr - e_arr) ** 2 / e_arr)), max(len(exp) - 1, 0)


def run_sphere_diffusion_check(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Polar-angle histograms at η = 1 from the north pole versus the Legendre series."""
    taus = np.asarray(spec.sweep["tau"])
    n_bins = spec.sweep["bins"]
    idx = np.rint(taus / spec.dt).astype(int)
    config = _config(spec, identical_detectors_from_eta(1.0), (0.0, 0.0, 1.0), float(taus.max()))
    results = run_ensemble(config, partial(_polar, idx=idx), point=0, executor=executor)
    cosines = np.array([r[0] for r in results])
    p_min = min(r[1] for r in results)
    n = cosines.shape[0]
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    summary = Table(["tau", "n", "chi2", "dof", "p_value", "theta2_mc", "theta2_stderr", "theta2_series",
                     "V", "purity_min"])
    hist = Table(["tau", "cos_lo", "cos_hi", "count", "expected"])
    for b, tau in enumerate(taus):
        counts, _ = np.histogram(cosines[:, b], bins=edges)
        expected = n * analytics.sphere_bin_probabilities(edges, tau)
        for lo, hi, c, e in zip(edges[:-1], edges[1:], counts, expected):
            hist.add(tau, lo, hi, int(c), e)
        chi2, dof = _merged_chi2(counts, expected)
        p_value = float(stats.chi2.sf(chi2, dof)) if dof > 0 else np.nan
        theta2 = np.arccos(np.clip(cosines[:, b], -1.0, 1.0)) ** 2
        t_mean, t_err = mean_stderr(theta2)
        summary.add(tau, n, chi2, dof, p_value, float(t_mean), float(t_err), analytics.theta_second_moment(tau),
                    analytics.variance_V(tau), p_min)
    return RunResult(spec, {"sphere": summary, "sphere_hist": hist})


def _rate_samples(config: SimulationConfig, purity: float, horizon: float, point: int,
                  indices: Sequence[int]) -> np.ndarray:
    """Per-trajectory Richardson-extrapolated initial purification rates.

    Each trajectory starts at radius √P₀ in an isotropic direction. The
    martingale part of P(t) − P₀ is subtracted as a control variate, then
    D(h) = [ΔP(h) − M(h)]/h is combined as 2D(h) − D(2h) to cancel the O(h) bias.
    """
    k = bin_factor(horizon, config.dt)
    arrays = EngineArrays.from_params(config.params)
    limit = overshoot_limit(config.scheme, config.dt)
    code = K.SCHEME_CODES[config.scheme]
    out = np.empty(len(indices))
    for n, j in enumerate(indices):
        r0 = math.sqrt(purity) * random_direction(aux_generator(config.seed, j, point))
        dw = noise_block(noise_generator(config.seed, j, point), 2 * k, config.params, config.dt)
        states, _, failed = K.simulate_path(r0, dw, config.dt, code, *arrays.args(), limit)
        if failed >= 0:
            raise PhysicalityError(f"trajectory {j} left the Bloch ball at step {failed}")
        d = []
        for steps in (k, 2 * k):
            p_end = float(states[steps] @ states[steps])
            mart = K.purification_increments(states, dw[:steps], arrays.coupling)
            d.append((p_end - purity - mart) / (steps * config.dt))
        out[n] = 2.0 * d[0] - d[1]
    return out


def _rate_chunk(args: tuple[Any, ...]) -> np.ndarray:
    return _rate_samples(*args)


def _run_rate(config: SimulationConfig, purity: float, horizon: float, point: int,
              executor: Executor | None) -> np.ndarray:
    n = config.ensemble_size
    if executor is None:
        return _rate_samples(config, purity, horizon, point, range(n))
    n_blocks = min(n, 4 * getattr(executor, "_max_workers", 1))
    bounds = np.linspace(0, n, n_blocks + 1).astype(int)
    tasks = [(config, purity, horizon, point, range(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return np.concatenate(list(executor.map(_rate_chunk, tasks)))


def run_purification_rate(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Initial ⟨dP⟩/dt for three detectors versus a lone z detector."""
    horizon = spec.sweep["horizon"]
    table = Table(["eta", "purity", "detectors", "rate_mc", "rate_mc_stderr", "rate_theory"])
    ratio = Table(["eta", "purity", "ratio", "ratio_stderr", "ratio_theory"])
    point = 0
    for eta in spec.sweep["eta"]:
        for purity in spec.sweep["purity"]:
            found = {}
            for label, params, theory in (
                ("three", identical_detectors_from_eta(eta), analytics.purity_drift(purity, eta)),
                ("single_z", single_z_detector(eta), analytics.single_axis_drift(purity, eta)),
            ):
                config = _config(spec, params, (0.0, 0.0, 0.0), 2 * horizon)
                samples = _run_rate(config, purity, horizon, point, executor)
                m, e = mean_stderr(samples)
                table.add(eta, purity, label, float(m), float(e), float(theory))
                found[label] = (float(m), float(e), float(theory))
                point += 1
            (m3, e3, t3), (m1, e1, t1) = found["three"], found["single_z"]
            q = m3 / m1
            ratio.add(eta, purity, q, abs(q) * math.hypot(e3 / m3, e1 / m1), t3 / t1)
    return RunResult(spec, {"purification": table, "purification_ratio": ratio})


def run_custom(spec: ExperimentSpec, executor: Executor | None = None) -> RunResult:
    """Ensemble moments of a user-supplied SimulationConfig."""
    assert spec.config is not None
    config = spec.config.__class__(**{**spec.config.__dict__, "ensemble_size": spec.ensemble_size})
    times = np.asarray(spec.sweep["times"])
    if times[-1] > config.total_time + 1e-12:
        raise ConfigError("sample times exceed total_time")
    idx = np.rint(times / config.dt).astype(int)
    values = np.array(run_ensemble(config, partial(_moments, idx=idx), executor=executor))
    mean, err = mean_stderr(values)
    names = ["x", "y", "z", "P", "r"]
    columns = ["t"] + [c for n in names for c in (n, f"{n}_stderr")]
    table = Table(columns)
    for m, t in enumerate(times):
        row: list[Any] = [t]
        for q in range(len(names)):
            row += [mean[m, q], err[m, q]]
        table.add(*row)
    dumps = {}
    for j in range(min(spec.dump_trajectories, config.ensemble_size)):
        states, record = simulate_arrays(config, j)
        dumps[f"trajectory{j}"] = trajectory_table(states, record, config.dt)
    return RunResult(spec, {"moments": table}, dumps=dumps)


def trajectory_table(states: np.ndarray, record: np.ndarray, dt: float) -> Table:
    """Columns (t, x, y, z, w_x, w_y, w_z); the increment on row m covers [t_m, t_{m+1}]."""
    table = Table(["t", "x", "y", "z", "w_x", "w_y", "w_z"])
    padded = np.vstack([record, np.full((1, 3), np.nan)])
    for m in range(states.shape[0]):
        table.add(m * dt, *states[m], *padded[m])
    return table


def estimate_table(times: np.ndarray, truth: np.ndarray, estimate: np.ndarray) -> Table:
    """Columns (t, rx, ry, rz, ex, ey, ez, dot)."""
    table = Table(["t", "rx", "ry", "rz", "ex", "ey", "ez", "dot"])
    for t, r, e in zip(times, truth, estimate):
        table.add(t, *r, *e, float(r @ e))
    return table


RECIPES: dict[str, Callable[[ExperimentSpec, Executor | None], RunResult]] = {
    "fig2_purity": run_fig2,
    "fig3_window_fidelity": run_fig3,
    "fig4_discrete_algorithms": run_fig4,
    "correlator_check": run_correlator_check,
    "sphere_diffusion_check": run_sphere_diffusion_check,
    "purification_rate": run_purification_rate,
    "custom": run_custom,
}


@contextmanager
def worker_pool(workers: int) -> Iterator[Executor | None]:
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool


def run_experiment(spec: ExperimentSpec, *, workers: int = 1) -> tuple[RunResult, dict[str, Any]]:
    """Run a recipe and return its tables plus run metadata."""
    if workers < 1:
        raise ConfigError("workers must be ≥ 1")
    started = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with worker_pool(workers) as pool:
            result = RECIPES[spec.kind](spec, pool)
    result.diagnostics.extend(f"warning: {w.message}" for w in caught)
    from . import __version__

    meta = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "dt": spec.dt,
        "scheme": spec.scheme,
        "ensemble_size": spec.ensemble_size,
        "fine_steps": spec.budget_steps(),
        "workers": workers,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "version": __version__,
        "tables": sorted(result.tables),
    }
    return result, meta
