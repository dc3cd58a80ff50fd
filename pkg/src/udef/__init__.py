"""Unified equilibrium finding for two-player zero-sum imperfect-information games."""

from ._validation import ConfigurationError, ContractError, NumericalError
from .average_oracles import LearnedLao, explicit_ao, pretrain_lao
from .games import PolicyTable, build_game, expected_value, nash_conv
from .pipeline import UDEFSolver, UdefConfig, preset, run_udef
from .response_oracle import neural_ro, tabular_ro
from .tabular import CFRSolver, FictitiousPlay
from .transforms import TransformPair, pretrain_transforms

__version__ = "0.1.0"

__all__ = [
    "CFRSolver",
    "ConfigurationError",
    "ContractError",
    "FictitiousPlay",
    "LearnedLao",
    "NumericalError",
    "PolicyTable",
    "TransformPair",
    "UDEFSolver",
    "UdefConfig",
    "build_game",
    "expected_value",
    "explicit_ao",
    "nash_conv",
    "neural_ro",
    "preset",
    "pretrain_lao",
    "pretrain_transforms",
    "run_udef",
    "tabular_ro",
]
