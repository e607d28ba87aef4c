"""Numerical solver for compressible primitive equations."""

from cpesim.core import (
    CFLError,
    CompatibilityReport,
    CPEError,
    DerivedFields,
    DiagnosticsRecord,
    Grid,
    NegativeDensityError,
    NumericalError,
    ParameterError,
    PrimState,
    Regime,
    ShapeError,
    SimParams,
    SingularSystemError,
    check_compatibility,
    integrate,
    make_state,
)

__version__ = "0.1.0"

__all__ = [
    "CFLError",
    "CompatibilityReport",
    "CPEError",
    "DerivedFields",
    "DiagnosticsRecord",
    "Grid",
    "NegativeDensityError",
    "NumericalError",
    "ParameterError",
    "PrimState",
    "Regime",
    "ShapeError",
    "SimParams",
    "SingularSystemError",
    "check_compatibility",
    "integrate",
    "make_state",
]
