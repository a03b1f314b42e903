"""
Simulation of a meter-based readout of the Chern number of a driven qubit.

The qubit is swept across a sphere of Hamiltonians while coupled to a
continuous meter through x * sigma_y; the meter momentum then records the
integrated Berry curvature.
"""

from .model import CouplingLaw, DriveParams, Protocol, fig1_params
from .propagator import IntegratorConfig, evolve

__all__ = ["CouplingLaw", "DriveParams", "IntegratorConfig", "Protocol", "evolve", "fig1_params"]
__version__ = "0.1.0"
