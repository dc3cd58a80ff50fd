import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from udef.games import PolicyTable, build_game  # noqa: E402


@pytest.fixture(scope="session")
def kuhn():
    return build_game("kuhn")


@pytest.fixture(scope="session")
def leduc():
    return build_game("leduc")


@pytest.fixture(scope="session")
def pennies():
    return build_game("matching_pennies")


def kuhn_table(game, bet_probs):
    """PolicyTable from ``{infoset key: P(bet)}``."""
    probs = np.zeros((game.num_infosets, 2))
    for i, key in enumerate(game.infoset_keys):
        probs[i] = [1.0 - bet_probs[key], bet_probs[key]]
    return PolicyTable(game, probs)


def table_to_kuhn(table):
    return {key: float(table.probs[i, 1]) for i, key in enumerate(table.game.infoset_keys)}


def random_table(game, rng):
    raw = rng.random((game.num_infosets, game.num_actions)) * game.legal_mask
    return PolicyTable(game, raw / raw.sum(axis=1, keepdims=True))
