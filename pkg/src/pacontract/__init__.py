"""Continuous-time principal / multi-agent contracting with jump-diffusion output.

Modules: ``model_core`` (problem instances), ``sim`` (path simulation and
Girsanov densities), ``nash`` (agents' Nash response and the principal's
Hamiltonian), ``bsde`` (continuation-utility processes), ``hjb`` (grid
solver for the principal's value), ``contract`` (contract synthesis and
Monte Carlo verification) and ``cli``.
"""

from .builtins import BUILTIN_NAMES, builtin_model, holmstrom_milgrom_closed_form
from .contract import (
    ContractOutcome,
    Deviation,
    DeviationReport,
    default_deviations,
    principal_value,
    synthesize_contract,
    verify_incentive_compatibility,
    verify_participation,
)
from .errors import (
    CFLError,
    ConvergenceError,
    DimensionError,
    ModelError,
    PAContractError,
    RegressionError,
    SimulationError,
)
from .hjb import FeedbackPolicy, SolverSettings, SpaceGrid, ValueSurface, extract_policy, fbsde_crosscheck, solve
from .model_core import ActionSpace, AgentSpec, JumpSpec, ModelSpec, PrincipalSpec, validate
from .nash import ControlPoint, HamiltonianSettings, best_response_fixed_point, hamiltonian_sup
from .sim import ConstantPolicy, TimeGrid, simulate_paths

__version__ = "0.1.0"
