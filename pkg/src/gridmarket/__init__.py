"""Market clearing on radial distribution feeders.

Locational pricing and two uniform-price designs built on dynamic operating
envelopes, with executable checks of their equilibrium and budget
properties.
"""

from .envelope import EnvelopeAllocation, allocate, envelope_check, equal_split
from .feeder import AffineConstraintMap, FeederModel, Line, voltage_constraint_map, voltages_from_injections
from .market import (
    ClearingResult,
    MarketInfeasible,
    Mechanism,
    PriceSet,
    best_response,
    clear,
    clear_locational,
    clear_uniform_doe,
    clear_uniform_limit,
    construct_limit_trades,
    settle,
)
from .prosumer import ProsumerFleet, ProsumerParams, QuadraticUtility, storage_prosumer
from .scenario import Scenario, emit_scenario, generate_synthetic, load_scenario
from .solver import ConvexProgram, ProgramBuilder, Solution, Status, check_slater, solve
from .verify import VerificationReport, brute_force_oracle, certify_equilibrium, verify_all

__all__ = [
    "AffineConstraintMap", "ClearingResult", "ConvexProgram", "EnvelopeAllocation", "FeederModel",
    "Line", "MarketInfeasible", "Mechanism", "PriceSet", "ProgramBuilder", "ProsumerFleet",
    "ProsumerParams", "QuadraticUtility", "Scenario", "Solution", "Status", "VerificationReport",
    "allocate", "best_response", "brute_force_oracle", "certify_equilibrium", "check_slater", "clear",
    "clear_locational", "clear_uniform_doe", "clear_uniform_limit", "construct_limit_trades",
    "emit_scenario", "envelope_check", "equal_split", "generate_synthetic", "load_scenario", "settle",
    "solve", "storage_prosumer", "verify_all", "voltage_constraint_map", "voltages_from_injections",
]
