"""Observer-based fault detection for droop-controlled grid-forming inverters.

Modules: ``model`` (13-state inverter), ``faults`` (fault matrices),
``sector`` (sampled nonlinearity constants), ``lmi`` (observer synthesis),
``detection`` (residuals, thresholds, triggering), ``microgrid``
(four-inverter simulator), ``io`` and ``cli``; ``estimators`` wraps the
main steps in scikit-learn style classes.
"""
from .faults import FaultKind, FaultMagnitudes, fault_signature
from .lmi import LmiInfeasible, ObserverDesign, SolverNumericalFailure, synthesize
from .model import GfmParameters, InverterModel, build_inverter_model, gfm12_parameters, gfm34_parameters
from .sector import OperatingRegion, SectorConstants, estimate_sector_constants, published_constants

__version__ = "0.1.0"

__all__ = [
    "FaultKind", "FaultMagnitudes", "GfmParameters", "InverterModel", "LmiInfeasible",
    "ObserverDesign", "OperatingRegion", "SectorConstants", "SolverNumericalFailure",
    "build_inverter_model", "estimate_sector_constants", "fault_signature",
    "gfm12_parameters", "gfm34_parameters", "published_constants", "synthesize",
]
