"""Equivalent-circuit fitting of impedance spectra under six loss functions."""

from .circuit import (
    CircuitModel,
    CircuitSyntaxError,
    ElementKind,
    ParamDescriptor,
    element_impedance,
    equivalent_permutations,
    format_circuit,
    impedance,
    parameter_schema,
    parse_circuit,
)
from .loss import GuardConfig, LossKind, loss_value, residuals
from .metrics import ape, ape_up_to_symmetry, chi_squared, mape, r2_triple
from .solver import FitOptions, FitOutcome, basinhop_fit, fit_multistart, fit_once, sample_initial_guess
from .spectrum import Spectrum

__version__ = "0.1.0"

__all__ = [
    "CircuitModel",
    "CircuitSyntaxError",
    "ElementKind",
    "FitOptions",
    "FitOutcome",
    "GuardConfig",
    "LossKind",
    "ParamDescriptor",
    "Spectrum",
    "ape",
    "ape_up_to_symmetry",
    "basinhop_fit",
    "chi_squared",
    "element_impedance",
    "equivalent_permutations",
    "fit_multistart",
    "fit_once",
    "format_circuit",
    "impedance",
    "loss_value",
    "mape",
    "parameter_schema",
    "parse_circuit",
    "r2_triple",
    "residuals",
    "sample_initial_guess",
]
