"""Monte Carlo and analytic toolkit for a qubit under simultaneous x, y, z monitoring."""

from __future__ import annotations

__version__ = "0.1.0"

from .core_model import (
    DetectorParams,
    MeasurementRecord,
    QubitState,
    SimulationConfig,
    expected_signal,
    identical_detectors_from_eta,
    purity,
    single_z_detector,
)
from .errors import ConfigError, DomainError, NumericalUnderflowError, PhysicalityError, TrimeasureError

__all__ = [
    "ConfigError",
    "DetectorParams",
    "DomainError",
    "MeasurementRecord",
    "NumericalUnderflowError",
    "PhysicalityError",
    "QubitState",
    "SimulationConfig",
    "TrimeasureError",
    "expected_signal",
    "identical_detectors_from_eta",
    "purity",
    "single_z_detector",
]
