"""Exact evaluation of profiles on a :class:`~udef.games.tree.Game`.

Every routine is a vectorised sweep over the depth levels of the tree:
reach probabilities flow top-down, values flow bottom-up.  Information
sets never straddle depths (checked at build time), so an infoset's
decision can be taken once all deeper levels are final.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import PolicyTable, as_probs
from .tree import CHANCE, TERMINAL

# Relative tolerance for treating two conditional action values as tied.
TIE_TOL = 1e-10


@dataclass(frozen=True)
class ReachDecomposition:
    own: float
    external: float
    total: float


@dataclass(frozen=True)
class CounterfactualValues:
    """Counterfactual values for one player's information sets.

    ``v`` and ``v_per_action`` are indexed by global infoset id; rows of the
    other player's infosets are zero.
    """

    player: int
    infosets: np.ndarray
    v: np.ndarray
    v_per_action: np.ndarray

    def __getitem__(self, infoset):
        return {"v": self.v[infoset], "v_per_action": self.v_per_action[infoset]}


@dataclass(frozen=True)
class NashConv:
    total: float
    per_player: np.ndarray


def _level_split(game):
    def build():
        out = []
        for idx in game.levels:
            pl = game.node_player[idx]
            out.append(
                {
                    "chance": idx[pl == CHANCE],
                    0: idx[pl == 0],
                    1: idx[pl == 1],
                    "nonterminal": idx[pl != TERMINAL],
                }
            )
        return tuple(out)

    return game._cached("level_split", build)


def action_prob_matrix(game, probs):
    """``(num_nodes, width)`` matrix of outgoing edge probabilities."""
    width = game.children.shape[1]
    P = np.zeros((game.num_nodes, width))
    pl = game.node_player
    chance = pl == CHANCE
    P[chance] = game.chance_probs[chance]
    dec = (pl == 0) | (pl == 1)
    P[dec, : game.num_actions] = probs[game.node_infoset[dec]]
    return P


def reach_matrix(game, profile):
    """Per-node reach products split by actor: columns player 0, player 1, chance."""
    probs = as_probs(game, profile)
    P = action_prob_matrix(game, probs)
    r = np.ones((game.num_nodes, 3))
    par, act, actor = game.node_parent, game.node_action, game.parent_actor
    for idx in game.levels[1:]:
        r[idx] = r[par[idx]]
        r[idx, actor[idx]] *= P[par[idx], act[idx]]
    return r


def reach(game, profile, h, viewer):
    """Reach decomposition of history ``h`` from ``viewer``'s perspective."""
    r = reach_matrix(game, profile)[h]
    own = r[viewer]
    external = r[1 - viewer] * r[CHANCE]
    return ReachDecomposition(own=float(own), external=float(external), total=float(own * external))


def node_values(game, profile):
    """Expected utility of both players from every history onward, ``(num_nodes, 2)``."""
    probs = as_probs(game, profile)
    P = action_prob_matrix(game, probs)
    val = np.array(game.node_utility, dtype=float)
    split = _level_split(game)
    for d in range(game.max_depth, -1, -1):
        idx = split[d]["nonterminal"]
        if len(idx) == 0:
            continue
        kids = game.children[idx]
        val[idx] = np.einsum("nk,nkp->np", P[idx], val[kids])
    return val


def expected_value(game, profile):
    """Exact expected payoff vector ``(u_0, u_1)`` of a complete profile."""
    return node_values(game, profile)[0].copy()


def _all_counterfactual(game, probs):
    """Counterfactual values of every infoset for the player acting there."""
    val = node_values(game, probs)
    r = reach_matrix(game, probs)
    nodes = game.player_edge_nodes
    par = game.node_parent[nodes]
    actor = game.node_player[par]
    ext = r[par, 1 - actor] * r[par, CHANCE]
    vpa = np.zeros((game.num_infosets, game.num_actions))
    np.add.at(vpa, (game.node_infoset[par], game.node_action[nodes]), ext * val[nodes, actor])
    v = (vpa * probs).sum(axis=1)
    return v, vpa, r


def counterfactual_values(game, profile, player):
    """Counterfactual infoset and action values of ``player`` under ``profile``."""
    probs = as_probs(game, profile)
    v, vpa, _ = _all_counterfactual(game, probs)
    mine = game.infoset_player == player
    return CounterfactualValues(
        player=player,
        infosets=np.flatnonzero(mine),
        v=np.where(mine, v, 0.0),
        v_per_action=np.where(mine[:, None], vpa, 0.0),
    )


def infoset_reach(game, profile, player):
    """Own and external reach of each of ``player``'s infosets.

    ``own`` is the (history-independent) product of the player's action
    probabilities; ``external`` sums opponent-and-chance reach over members.
    """
    r = reach_matrix(game, profile)
    rep = game.infoset_representative
    own = r[rep, player]
    node_ext = r[:, 1 - player] * r[:, CHANCE]
    ext = np.zeros(game.num_infosets)
    dec = np.flatnonzero(game.node_player == player)
    np.add.at(ext, game.node_infoset[dec], node_ext[dec])
    mine = game.infoset_player == player
    return np.where(mine, own, 0.0), np.where(mine, ext, 0.0)


def greedy_actions(values, mask, scale=1.0):
    """Lowest legal action whose value is within tolerance of the row maximum."""
    v = np.where(mask, values, -np.inf)
    best = v.max(axis=-1, keepdims=True)
    tol = TIE_TOL * max(1.0, float(scale))
    return np.argmax(v >= best - tol, axis=-1)


@dataclass(frozen=True)
class ResponseValues:
    """Action values of one player against fixed opponents.

    ``q`` holds values conditional on reaching each infoset (external-reach
    weighted average over members), ``external`` the summed external reach,
    ``greedy`` the chosen action per infoset and ``sampling`` the policy the
    continuation values were computed under.
    """

    player: int
    q: np.ndarray
    external: np.ndarray
    greedy: np.ndarray
    sampling: np.ndarray
    value: float


def respond(game, player, profile, historical=None, hs=1.0):
    """Bottom-up response of ``player`` against the other rows of ``profile``.

    At each of the player's infosets the continuation policy is
    ``(1 - hs) * historical + hs * onehot(argmax q)``, evaluated deepest
    level first.  ``hs = 1`` yields an exact best response.
    """
    probs = as_probs(game, profile)
    hist = probs if historical is None else as_probs(game, historical)
    A = game.num_actions
    mask = game.legal_mask
    scale = float(game.utility_range[player])
    r = reach_matrix(game, probs)
    node_ext = r[:, 1 - player] * r[:, CHANCE]
    P = action_prob_matrix(game, probs)
    val = np.array(game.node_utility[:, player], dtype=float)
    Q = np.zeros((game.num_infosets, A))
    ext_I = np.zeros(game.num_infosets)
    q = np.zeros((game.num_infosets, A))
    greedy = np.zeros(game.num_infosets, dtype=np.int64)
    sampling = np.array(hist, dtype=float)
    split = _level_split(game)
    for d in range(game.max_depth, -1, -1):
        lv = split[d]
        others = np.concatenate([lv["chance"], lv[1 - player]])
        if len(others):
            kids = game.children[others]
            val[others] = (P[others] * val[kids]).sum(axis=1)
        mine = lv[player]
        if len(mine) == 0:
            continue
        iset = game.node_infoset[mine]
        qh = val[game.children[mine, :A]]
        np.add.at(Q, iset, node_ext[mine, None] * qh)
        np.add.at(ext_I, iset, node_ext[mine])
        ids = np.unique(iset)
        reached = ext_I[ids] > 0.0
        q[ids] = np.where(reached[:, None], Q[ids] / np.where(reached, ext_I[ids], 1.0)[:, None], 0.0)
        q[ids] = np.where(mask[ids], q[ids], 0.0)
        greedy[ids] = greedy_actions(q[ids], mask[ids], scale)
        onehot = np.eye(A)[greedy[ids]]
        sampling[ids] = (1.0 - hs) * hist[ids] + hs * onehot
        val[mine] = (sampling[iset] * np.where(mask[iset], qh, 0.0)).sum(axis=1)
    mine_all = game.infoset_player == player
    return ResponseValues(
        player=player,
        q=np.where(mine_all[:, None], q, 0.0),
        external=np.where(mine_all, ext_I, 0.0),
        greedy=greedy,
        sampling=sampling,
        value=float(val[0]),
    )


def best_response(game, opponent_profile, player):
    """Exact best response of ``player``; returns ``(PolicyTable, value)``.

    The returned table holds the pure response on ``player``'s infosets and
    the opponent's rows elsewhere.  Ties go to the lowest legal action.
    """
    res = respond(game, player, opponent_profile, hs=1.0)
    probs = np.array(as_probs(game, opponent_profile), dtype=float)
    mine = game.infosets_of(player)
    probs[mine] = np.eye(game.num_actions)[res.greedy[mine]]
    return PolicyTable(game, probs, validate=False), res.value


def nash_conv(game, profile):
    """Sum over players of best-response value minus current value."""
    probs = as_probs(game, profile)
    u = expected_value(game, probs)
    per = np.array([respond(game, p, probs, hs=1.0).value - u[p] for p in (0, 1)])
    return NashConv(total=float(per.sum()), per_player=per)


def realization_weights(game, profile, player):
    """Own reach of each of ``player``'s infosets (zero elsewhere)."""
    return infoset_reach(game, profile, player)[0]


def mixture_policy(game, tables, weights):
    """Behavioural form of the mixed strategy that plays ``tables[k]`` w.p. ``weights[k]``.

    Each player's rows are the realization-weighted average of the
    components; infosets no component reaches fall back to uniform.
    ``weights`` is either one vector shared by both players or a pair.
    """
    if len(tables) == 0:
        return PolicyTable.uniform(game)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = np.stack([weights, weights])
    num = np.zeros((game.num_infosets, game.num_actions))
    den = np.zeros(game.num_infosets)
    for k, t in enumerate(tables):
        probs = as_probs(game, t)
        r = reach_matrix(game, probs)[game.infoset_representative]
        own = r[np.arange(game.num_infosets), game.infoset_player]
        w = weights[game.infoset_player, k] * own
        num += w[:, None] * probs
        den += w
    mask = game.legal_mask
    uniform = mask / mask.sum(axis=1, keepdims=True)
    ok = den > 0.0
    out = np.where(ok[:, None], num / np.where(ok, den, 1.0)[:, None], uniform)
    return PolicyTable(game, out, validate=False)
