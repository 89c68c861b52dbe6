"""Exception types raised across the package."""

from __future__ import annotations


class TrimeasureError(Exception):
    """Base class for all package errors."""


class DomainError(TrimeasureError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ConfigError(TrimeasureError, ValueError):
    """A configuration document or experiment spec is invalid."""


class PhysicalityError(TrimeasureError, ValueError):
    """A Bloch vector left the unit ball by more than the clamp threshold."""


class NumericalUnderflowError(TrimeasureError, ArithmeticError):
    """Both outcome likelihoods underflowed to zero."""
