"""Exact worst-case verification of neural-network DC-OPF proxies."""

from .attack import AttackConfig, run_attack
from .bounds import BoundsTable, crown_bounds, ibp, obbt_milp, tighten_all
from .dataset import Dataset, generate_dataset, load_dataset, save_dataset
from .dcopf import solve_dcopf
from .errors import OpfVerifyError
from .grid import Network, bundled_grid, compute_ptdf, load_network
from .lp import LpProblem, solve_lp
from .milp import BnbLimits, branch_and_bound, encode_milp
from .nn import MlpModel, TrainConfig, forward, init_model, load_model, save_model, train
from .verify import (VerifyResult, pattern_enumeration_oracle, verify_all_lines, verify_line_flow,
                     verify_power_balance)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "BnbLimits", "BoundsTable", "Dataset", "LpProblem", "MlpModel", "Network",
    "OpfVerifyError", "TrainConfig", "VerifyResult", "branch_and_bound", "bundled_grid", "compute_ptdf",
    "crown_bounds", "encode_milp", "forward", "generate_dataset", "ibp", "init_model", "load_dataset",
    "load_model", "load_network", "obbt_milp", "pattern_enumeration_oracle", "run_attack", "save_dataset",
    "save_model", "solve_dcopf", "solve_lp", "tighten_all", "train", "verify_all_lines", "verify_line_flow",
    "verify_power_balance",
]
