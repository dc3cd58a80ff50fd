"""Game trees, behavioural policies and exact evaluators."""

from __future__ import annotations

import re

from .._validation import ConfigurationError
from .evaluation import (
    CounterfactualValues,
    NashConv,
    ReachDecomposition,
    ResponseValues,
    best_response,
    counterfactual_values,
    expected_value,
    infoset_reach,
    mixture_policy,
    nash_conv,
    node_values,
    reach,
    reach_matrix,
    realization_weights,
    respond,
)
from .matrix import MATCHING_PENNIES, ROCK_PAPER_SCISSORS, MatrixRules, random_matrix_payoffs
from .poker import KuhnRules, LeducRules
from .policy import PolicyTable, normalize_rows
from .sampling import playout, sample_payoffs
from .tree import CHANCE, TERMINAL, Game, build_from_rules

__all__ = [
    "CHANCE",
    "TERMINAL",
    "CounterfactualValues",
    "Game",
    "NashConv",
    "PolicyTable",
    "ReachDecomposition",
    "ResponseValues",
    "best_response",
    "build_from_rules",
    "build_game",
    "counterfactual_values",
    "expected_value",
    "infoset_reach",
    "matrix_game",
    "mixture_policy",
    "nash_conv",
    "playout",
    "node_values",
    "normalize_rows",
    "reach",
    "reach_matrix",
    "realization_weights",
    "respond",
    "sample_payoffs",
]

_RANDOM_MATRIX = re.compile(r"^random_matrix(?:\((\d+)\)|:(\d+))$")


def matrix_game(payoffs, name="matrix"):
    """Game for a zero-sum payoff matrix (row player's utilities)."""
    return build_from_rules(MatrixRules(payoffs), name)


def build_game(name, seed=None):
    """Construct a named game.

    Known names: ``kuhn``, ``leduc``, ``matching_pennies``, ``rps`` and
    ``random_matrix(k)`` (also spelled ``random_matrix:k``), a ``k x k``
    game with uniform [-1, 1] payoffs drawn from ``seed``.
    """
    key = str(name).strip().lower()
    if key == "kuhn":
        return build_from_rules(KuhnRules(), "kuhn")
    if key == "leduc":
        return build_from_rules(LeducRules(), "leduc")
    if key == "matching_pennies":
        return matrix_game(MATCHING_PENNIES, "matching_pennies")
    if key == "rps":
        return matrix_game(ROCK_PAPER_SCISSORS, "rps")
    m = _RANDOM_MATRIX.match(key)
    if m:
        k = int(m.group(1) or m.group(2))
        return matrix_game(random_matrix_payoffs(k, seed), f"random_matrix({k})")
    raise ConfigurationError(f"unknown game {name!r}")
