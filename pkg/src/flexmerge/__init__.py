"""Merger simulation with flexible, neural-network supply functions.

Data generation, equilibrium solvers, the conduct-model toolkit, the
two-stage adversarial (VMM) estimator of a supply function, merger
counterfactuals and point-value inference.
"""

from .datagen import Dataset, ScenarioConfig, apply_merger, generate, split
from .equilibrium import SolverConfig, SolverMethod
from .errors import FlexMergeError, InvalidInput
from .market_model import ConductSpec, DemandSpec, MarketData

__version__ = "0.1.0"

__all__ = [
    "ConductSpec",
    "Dataset",
    "DemandSpec",
    "FlexMergeError",
    "InvalidInput",
    "MarketData",
    "ScenarioConfig",
    "SolverConfig",
    "SolverMethod",
    "apply_merger",
    "generate",
    "split",
]
