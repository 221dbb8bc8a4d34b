"""Moving horizon joint state and parameter estimation.

Submodules:
    model       parameter-affine system class, simulation, averaged Jacobians
    certificate detectability certificates: synthesis, verification, weights
    excitation  Y/S recursions, joint Lyapunov value, PE and kappa checks
    estimator   the horizon problem, projected LM solver, online monitor
    analysis    error series, envelope constants, N-step decrease checks
    cli         configuration ingestion, experiment orchestration, CSV export
"""

from .model import Box, SystemModel, Trajectory, chua_model, simulate
from .certificate import (
    DetectabilityCertificate,
    build_certificate,
    synthesize_constant_phi,
)
from .excitation import ExcitationState, PeConfig
from .estimator import MheConfig, MheEstimator, SolverConfig
from .analysis import ErrorReport, RgesConstants, error_series, rges_constants

__version__ = "0.1.0"

__all__ = [
    "Box",
    "SystemModel",
    "Trajectory",
    "chua_model",
    "simulate",
    "DetectabilityCertificate",
    "build_certificate",
    "synthesize_constant_phi",
    "ExcitationState",
    "PeConfig",
    "MheConfig",
    "MheEstimator",
    "SolverConfig",
    "ErrorReport",
    "RgesConstants",
    "error_series",
    "rges_constants",
]
