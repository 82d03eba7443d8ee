"""Entropy-minimal stochastic maps from a distribution to itself.

Trains the time-symmetric diffusion bridging a distribution back to
itself relative to a mean-reverting reference, by alternating a
regression-based projection with a closed-form drift average. The
Gaussian case has an exact solution used as the test oracle throughout.
"""

from .amp import AMPConfig, run_amp
from .cli import RunConfig, main
from .data import DatasetSpec, empirical_moments, energy_distance, mixing_rate, sample_dataset
from .errors import MirrorBridgeError
from .oracle import GaussianBridgeSolution, beta, sigma1_sq, solve_grid_bridge

__version__ = "0.1.0"

__all__ = [
    "AMPConfig",
    "DatasetSpec",
    "GaussianBridgeSolution",
    "MirrorBridgeError",
    "RunConfig",
    "beta",
    "empirical_moments",
    "energy_distance",
    "main",
    "mixing_rate",
    "run_amp",
    "sample_dataset",
    "sigma1_sq",
    "solve_grid_bridge",
    "__version__",
]
