"""Numerical laboratory for the Anderson model on the Bethe lattice."""

from .cavity import (
    CavityEstimate,
    CavityParams,
    EtaProtocol,
    McBudget,
    estimate_dos,
    estimate_free_energy,
    estimate_greens_second_moment,
    estimate_ids,
    estimate_lyapunov,
    estimate_phi_at_one,
)
from .disorder import DisorderSpec
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    InconsistencyError,
    SamplingError,
    SizeError,
)
from .rng import RngHandle, derive

__all__ = [
    "CavityEstimate",
    "CavityParams",
    "ConfigurationError",
    "ConvergenceError",
    "DisorderSpec",
    "DomainError",
    "EtaProtocol",
    "InconsistencyError",
    "McBudget",
    "RngHandle",
    "SamplingError",
    "SizeError",
    "derive",
    "estimate_dos",
    "estimate_free_energy",
    "estimate_greens_second_moment",
    "estimate_ids",
    "estimate_lyapunov",
    "estimate_phi_at_one",
]
