"""Moment methods and a sectional reference solver for aggregation-breakage population balances."""
from .closures import (
    AtomicReconstruction,
    MaxEntReconstruction,
    MomentVector,
    NewtonParams,
    PolynomialReconstruction,
    maxent_solve,
    pn_close,
    realizable_q,
    wheeler_invert,
)
from .errors import DomainError, OptimizationError, PBEError, RealizabilityError, TimeStepError
from .kernels import AggregationConfig, BreakageConfig, KernelSet, VolumeDomain
from .quadrature import QuadratureRule, gauss_lobatto

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig", "AtomicReconstruction", "BreakageConfig", "DomainError", "KernelSet",
    "MaxEntReconstruction", "MomentVector", "NewtonParams", "OptimizationError", "PBEError",
    "PolynomialReconstruction", "QuadratureRule", "RealizabilityError", "TimeStepError", "VolumeDomain",
    "gauss_lobatto", "maxent_solve", "pn_close", "realizable_q", "wheeler_invert",
]
