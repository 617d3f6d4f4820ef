"""Exact and renormalization-group solvers for the quasi-periodically
modulated two-dimensional Ising model."""

__version__ = "0.1.0"

from .qpcore import (  # noqa: F401
    BoxSpec,
    CouplingField,
    Frequency,
    ModulationSpec,
    best_approximants,
    build_couplings,
    continued_fraction,
    diophantine_constant,
    fourier_coefficients,
    golden,
    preset_modulation,
    silver,
    torus_norm,
)
