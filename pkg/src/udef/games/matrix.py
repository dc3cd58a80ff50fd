"""Zero-sum matrix games expressed as two-move extensive-form games."""

from __future__ import annotations

import numpy as np

from .._validation import ConfigurationError

MATCHING_PENNIES = np.array([[1.0, -1.0], [-1.0, 1.0]])
ROCK_PAPER_SCISSORS = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])


class MatrixRules:
    """Player 0 picks a row, player 1 a column without observing it.

    ``payoffs[r, c]`` is player 0's utility.  Each player owns exactly one
    information set.
    """

    def __init__(self, payoffs):
        payoffs = np.asarray(payoffs, dtype=float)
        if payoffs.ndim != 2 or payoffs.size == 0:
            raise ConfigurationError("payoff matrix must be a nonempty 2-D array")
        self.payoffs = payoffs
        self.shape = payoffs.shape
        self.action_names = [f"a{k}" for k in range(max(self.shape))]

    def initial_state(self):
        return ()

    def is_terminal(self, state):
        return len(state) == 2

    def current_player(self, state):
        return len(state)

    def chance_outcomes(self, state):
        return []

    def legal_actions(self, state):
        return list(range(self.shape[len(state)]))

    def next_state(self, state, a):
        return state + (a,)

    def returns(self, state):
        u = float(self.payoffs[state])
        return (u, -u)

    def infoset_key(self, state, player):
        return "row" if player == 0 else "col"

    def infoset_features(self, state, player):
        return np.ones(1)


def random_matrix_payoffs(k, seed=None):
    """``k x k`` payoffs drawn uniformly from [-1, 1]."""
    if k < 1:
        raise ConfigurationError("random_matrix size must be >= 1")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(k, k))
