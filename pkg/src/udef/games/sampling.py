"""Vectorised Monte-Carlo playouts over a game tree."""

from __future__ import annotations

import numpy as np

from .evaluation import action_prob_matrix
from .policy import as_probs
from .tree import TERMINAL


def playout(game, profile, episodes, rng, antithetic=False, record=False):
    """Sample ``episodes`` full trajectories under ``profile``.

    All episodes advance one ply per step.  With ``antithetic`` the second
    half of the episodes reuses the first half's uniforms as ``1 - u``.
    Returns the terminal node of each episode, plus the ``(episodes, depth+1)``
    node path (padded with ``-1``) when ``record`` is set.
    """
    probs = as_probs(game, profile)
    P = action_prob_matrix(game, probs)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = np.where(game.node_player != TERMINAL, 1.0 + 1e-12, cum[:, -1])
    n = int(episodes)
    half = (n + 1) // 2 if antithetic else n
    depth = game.max_depth
    u = rng.random((half, depth))
    if antithetic:
        u = np.concatenate([u, 1.0 - u[: n - half]])
    cur = np.zeros(n, dtype=np.int64)
    path = np.full((n, depth + 1), -1, dtype=np.int64) if record else None
    if record:
        path[:, 0] = 0
    for step in range(depth):
        live = np.flatnonzero(game.node_player[cur] != TERMINAL)
        if len(live) == 0:
            break
        c = cur[live]
        pick = (u[live, step, None] >= cum[c]).sum(axis=1)
        # guard against rounding past the last positive-probability slot
        pick = np.minimum(pick, P.shape[1] - 1)
        bad = P[c, pick] <= 0.0
        if bad.any():
            pick[bad] = _last_positive(P[c[bad]])
        cur[live] = game.children[c, pick]
        if record:
            path[live, step + 1] = cur[live]
    return (cur, path) if record else cur


def _last_positive(rows):
    return rows.shape[1] - 1 - np.argmax(rows[:, ::-1] > 0.0, axis=1)


def sample_payoffs(game, profile, episodes, rng, antithetic=True):
    """Player-0 payoffs of sampled episodes."""
    term = playout(game, profile, episodes, rng, antithetic=antithetic)
    return game.node_utility[term, 0]
