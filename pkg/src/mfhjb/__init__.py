"""Finite-difference and Monte Carlo reference numerics for mean-field-type
control: HJB on the Wasserstein space, flows, fixed points and value checks."""
from .errors import MfhjbError
from .measure import Grid1D, GridDensity, MeasureFlow, ParticleEnsemble, TimeMesh
from .model import AssumptionConstants, BuiltinFamily, ModelSpec, build_model

__version__ = "0.1.0"

__all__ = ["AssumptionConstants", "BuiltinFamily", "Grid1D", "GridDensity", "MeasureFlow",
           "MfhjbError", "ModelSpec", "ParticleEnsemble", "TimeMesh", "build_model", "__version__"]
