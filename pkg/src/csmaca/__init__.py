"""CSMA/CA scheduling with collisions on conflict graphs.

Exact product-form analysis (:mod:`.stationary`), optimal payload exponents
and capacity-region bounds (:mod:`.optimizer`), a slot-level simulator
(:mod:`.simulator`), payload-length control (:mod:`.adaptive`) and a
brute-force Markov chain oracle (:mod:`.oracle`).
"""
from .errors import (CapacityError, ConfigError, CsmaError, DimensionError, DomainError,
                     NonConvergenceError, PreconditionError, SolverError)
from .graph import ConflictGraph, classify, independent_sets
from .stationary import (ProtocolParams, detailed_distribution, log_likelihood,
                         onoff_distribution, service_rates)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "ConflictGraph", "CsmaError", "DimensionError",
    "DomainError", "NonConvergenceError", "PreconditionError", "ProtocolParams", "SolverError",
    "classify", "detailed_distribution", "independent_sets", "log_likelihood",
    "onoff_distribution", "service_rates",
]
