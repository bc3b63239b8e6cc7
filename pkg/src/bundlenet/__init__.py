"""Proximal bundle methods and a learned Bundle Network for Lagrangian duals."""
from .oracles import (ContractError, GapInstance, GapParams, InstanceFormatError, McndInstance,
                      McndParams, OracleHandle, function_oracle, gap_percent, generate_gap,
                      generate_mcnd, load_instance, make_min_oracle, save_instance)
from .eta_strategies import EtaConfig
from .master_problem import solve_dmp
from .solvers import SolverConfig, SolverError, Trace, run_adam, run_bundle, run_descent

__version__ = "0.1.0"
