"""Stochastic mechanics toolkit: Nelson diffusions of wavefunctions, Bayesian
position measurement, the classical Fokker-Planck analogue and numerical
checks of the associated variational identities."""

from .core import (Density, Grid1D, PhysicalParams, ScalarPotential, Wavefunction, born_density,
                   gaussian_wavefunction, harmonic_ground_state, normalize)
from .errors import *  # noqa: F401,F403
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Density", "Grid1D", "PhysicalParams", "ScalarPotential", "Wavefunction",
           "born_density", "gaussian_wavefunction", "harmonic_ground_state", "normalize"]
