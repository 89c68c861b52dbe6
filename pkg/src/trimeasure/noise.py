"""Counter-based noise streams.

Every trajectory owns an independent Philox stream whose 128-bit key is
``(master_seed, point << 32 | trajectory)``. Philox is a keyed bijection on
its counter, so distinct keys give statistically independent streams and any
single (point, trajectory) pair can be regenerated in isolation. Within a
stream the normals for fine step ``m`` are elements ``3m .. 3m+2``, so the
values do not depend on how the stream is chunked or on worker count.

Auxiliary draws that are not detector noise (random initial directions,
for example) come from a second stream with bit 31 of the point field set,
so they never shift the detector-noise positions.
"""

from __future__ import annotations

import numpy as np

from .core_model import DetectorParams
from .errors import ConfigError

_U32 = 2**32
_AUX_BIT = 1 << 31


def stream_key(seed: int, trajectory: int, point: int = 0) -> np.ndarray:
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must fit in 64 bits, got {seed}")
    if not (0 <= trajectory < _U32 and 0 <= point < _U32):
        raise ConfigError("trajectory and sweep-point indices must fit in 32 bits")
    return np.array([seed, (point << 32) | trajectory], dtype=np.uint64)


def noise_generator(seed: int, trajectory: int, point: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, trajectory, point)))


def noise_scale(params: DetectorParams, dt: float) -> np.ndarray:
    """Standard deviation √(S_k dt/2) of each per-step noise increment."""
    return np.sqrt(np.asarray(params.s_k) * dt / 2.0)


def noise_block(gen: np.random.Generator, n_steps: int, params: DetectorParams, dt: float) -> np.ndarray:
    """Next ``n_steps`` increments ∫ξ_k dt from ``gen``, shape (n_steps, 3)."""
    return gen.standard_normal((n_steps, 3)) * noise_scale(params, dt)


def aux_generator(seed: int, trajectory: int, point: int = 0) -> np.random.Generator:
    """Stream for non-noise randomness tied to one (point, trajectory) pair."""
    if not 0 <= point < _AUX_BIT:
        raise ConfigError("sweep-point index must fit in 31 bits")
    return noise_generator(seed, trajectory, point | _AUX_BIT)


def random_direction(gen: np.random.Generator) -> np.ndarray:
    """Isotropic unit vector."""
    while True:
        v = gen.standard_normal(3)
        norm = float(np.linalg.norm(v))
        if norm > 1e-12:
            return v / norm
