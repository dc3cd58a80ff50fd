"""Flat-array extensive-form game trees.

A :class:`Game` is built once from a *rules* object by depth-first
enumeration of every history.  Nodes are stored in DFS preorder, so a
parent always has a smaller index than its children, and information sets
receive ids in order of first visit.  All arrays are read-only after
construction, which makes a game safe to share between threads.

A rules object implements::

    initial_state()
    is_terminal(state) -> bool
    current_player(state) -> 0, 1 or CHANCE
    legal_actions(state) -> list of action ids in [0, num_actions)
    chance_outcomes(state) -> list of (outcome, probability)
    next_state(state, action_or_outcome)
    returns(state) -> (u0, u1)
    infoset_key(state, player) -> str
    action_names: list of str, one per action id
    outcome_label(outcome) -> str               (optional, defaults to str)
    infoset_features(state, player) -> vector   (optional)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._validation import ConfigurationError

CHANCE = 2
TERMINAL = -1

_ZERO_SUM_ATOL = 1e-12
_CHANCE_ATOL = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Game:
    """Immutable two-player zero-sum game tree.

    Per-node arrays are indexed by history id; per-infoset arrays by infoset
    id.  Player decisions are indexed by *action id* (``children[h, a]`` is
    ``-1`` for illegal ``a``); chance nodes index their outcomes
    ``0..k-1``.
    """

    name: str
    action_names: tuple
    num_actions: int
    node_player: np.ndarray
    node_parent: np.ndarray
    node_action: np.ndarray
    node_depth: np.ndarray
    node_infoset: np.ndarray
    node_chance_prob: np.ndarray
    node_utility: np.ndarray
    children: np.ndarray
    chance_probs: np.ndarray
    history_labels: tuple
    infoset_player: np.ndarray
    infoset_keys: tuple
    infoset_members: tuple
    infoset_depth: np.ndarray
    legal_mask: np.ndarray
    infoset_features: np.ndarray
    utility_range: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_nodes(self):
        return len(self.node_player)

    @property
    def num_infosets(self):
        return len(self.infoset_player)

    @property
    def max_depth(self):
        return int(self.node_depth.max())

    @property
    def num_features(self):
        return self.infoset_features.shape[1]

    def infosets_of(self, player):
        """Ids of the information sets where ``player`` acts."""
        return np.flatnonzero(self.infoset_player == player)

    def legal_actions(self, infoset):
        return np.flatnonzero(self.legal_mask[infoset])

    def max_legal_actions(self, player):
        ids = self.infosets_of(player)
        if len(ids) == 0:
            return 1
        return int(self.legal_mask[ids].sum(axis=1).max())

    def is_terminal(self, h):
        return self.node_player[h] == TERMINAL

    def infoset_index(self, key):
        return self._cached("key_index", lambda: {k: i for i, k in enumerate(self.infoset_keys)})[key]

    def _cached(self, name, fn):
        if name not in self._cache:
            self._cache[name] = fn()
        return self._cache[name]

    # Derived structures used by the vectorised evaluators.

    @property
    def levels(self):
        """Node ids grouped by depth (``levels[d]``)."""

        def build():
            order = np.argsort(self.node_depth, kind="stable")
            bounds = np.searchsorted(self.node_depth[order], np.arange(self.max_depth + 2))
            return tuple(_readonly(order[bounds[d] : bounds[d + 1]]) for d in range(self.max_depth + 1))

        return self._cached("levels", build)

    @property
    def parent_actor(self):
        """Column of the reach matrix that the edge into each node multiplies."""

        def build():
            actor = np.full(self.num_nodes, CHANCE, dtype=np.int64)
            nonroot = self.node_parent >= 0
            actor[nonroot] = self.node_player[self.node_parent[nonroot]]
            return _readonly(actor)

        return self._cached("parent_actor", build)

    @property
    def player_edge_nodes(self):
        """Non-root nodes whose parent is a player decision."""

        def build():
            nonroot = self.node_parent >= 0
            idx = np.flatnonzero(nonroot)
            par = self.node_parent[idx]
            keep = (self.node_player[par] == 0) | (self.node_player[par] == 1)
            return _readonly(idx[keep])

        return self._cached("player_edge_nodes", build)

    @property
    def infoset_representative(self):
        return self._cached(
            "repr", lambda: _readonly(np.array([m[0] for m in self.infoset_members], dtype=np.int64))
        )

    @property
    def terminal_nodes(self):
        return self._cached("terminals", lambda: _readonly(np.flatnonzero(self.node_player == TERMINAL)))

    def dump(self):
        """Deterministic text description, one line per node and per infoset."""
        lines = [f"game {self.name} nodes={self.num_nodes} infosets={self.num_infosets}"]
        for h in range(self.num_nodes):
            p = int(self.node_player[h])
            label = self.history_labels[h] or "-"
            if p == TERMINAL:
                u = self.node_utility[h]
                lines.append(f"node {h} terminal history={label} utility={float(u[0])!r},{float(u[1])!r}")
            elif p == CHANCE:
                kids = [c for c in self.children[h] if c >= 0]
                probs = ",".join(f"{c}:{float(self.chance_probs[h, k])!r}" for k, c in enumerate(kids))
                lines.append(f"node {h} chance history={label} children={probs}")
            else:
                acts = np.flatnonzero(self.children[h] >= 0)
                names = ",".join(self.action_names[a] for a in acts)
                kids = ",".join(str(self.children[h, a]) for a in acts)
                lines.append(
                    f"node {h} player={p} infoset={self.node_infoset[h]} history={label} "
                    f"actions={names} children={kids}"
                )
        for i in range(self.num_infosets):
            names = ",".join(self.action_names[a] for a in self.legal_actions(i))
            members = ",".join(str(m) for m in self.infoset_members[i])
            lines.append(
                f"infoset {i} player={self.infoset_player[i]} key={self.infoset_keys[i]} "
                f"actions={names} members={members}"
            )
        return "\n".join(lines) + "\n"


def build_from_rules(rules, name):
    """Enumerate ``rules`` depth-first into a :class:`Game`."""
    num_actions = len(rules.action_names)
    outcome_label = getattr(rules, "outcome_label", str)
    feature_fn = getattr(rules, "infoset_features", None)

    player, parent, action, depth, infoset = [], [], [], [], []
    chance_prob, utility, labels = [], [], []
    kids_rows, kid_probs = [], []
    key_to_id, keys, members, iset_player, iset_depth, masks, feats = {}, [], [], [], [], [], []

    stack = [(rules.initial_state(), -1, -1, 0, 1.0, "")]
    # Explicit stack keeps preorder without recursion limits (Leduc is deep enough to matter).
    while stack:
        state, par, act, d, cprob, label = stack.pop()
        h = len(player)
        if par >= 0:
            kids_rows[par][act] = h
        parent.append(par)
        action.append(act)
        depth.append(d)
        chance_prob.append(cprob)
        labels.append(label)
        sep = " " if label else ""
        if rules.is_terminal(state):
            u = np.asarray(rules.returns(state), dtype=float)
            if abs(u[0] + u[1]) > _ZERO_SUM_ATOL:
                raise ConfigurationError(f"terminal {label!r} is not zero-sum: {u}")
            player.append(TERMINAL)
            infoset.append(-1)
            utility.append(u)
            kids_rows.append({})
            kid_probs.append({})
            continue
        utility.append(np.zeros(2))
        p = rules.current_player(state)
        if p == CHANCE:
            outcomes = list(rules.chance_outcomes(state))
            total = sum(pr for _, pr in outcomes)
            if abs(total - 1.0) > _CHANCE_ATOL:
                raise ConfigurationError(f"chance probabilities at {label!r} sum to {total}")
            player.append(CHANCE)
            infoset.append(-1)
            kids_rows.append({})
            kid_probs.append({k: pr for k, (_, pr) in enumerate(outcomes)})
            for k in reversed(range(len(outcomes))):
                o, pr = outcomes[k]
                stack.append((rules.next_state(state, o), h, k, d + 1, float(pr), label + sep + outcome_label(o)))
            continue
        legal = list(rules.legal_actions(state))
        if not legal:
            raise ConfigurationError(f"non-terminal history {label!r} has no legal action")
        key = rules.infoset_key(state, p)
        mask = np.zeros(num_actions, dtype=bool)
        mask[legal] = True
        if key not in key_to_id:
            key_to_id[key] = len(keys)
            keys.append(key)
            members.append([])
            iset_player.append(p)
            iset_depth.append(d)
            masks.append(mask)
            feats.append(None if feature_fn is None else np.asarray(feature_fn(state, p), dtype=float))
        i = key_to_id[key]
        if iset_player[i] != p or not np.array_equal(masks[i], mask):
            raise ConfigurationError(f"infoset {key!r} mixes players or legal-action sets")
        if iset_depth[i] != d:
            raise ConfigurationError(f"infoset {key!r} has members at different depths")
        members[i].append(h)
        player.append(p)
        infoset.append(i)
        kids_rows.append({})
        kid_probs.append({})
        for a in reversed(legal):
            stack.append((rules.next_state(state, a), h, a, d + 1, 1.0, label + sep + rules.action_names[a]))

    n = len(player)
    width = max([num_actions] + [len(k) for k in kid_probs])
    children = np.full((n, width), -1, dtype=np.int64)
    cprobs = np.zeros((n, width))
    for h in range(n):
        for a, c in kids_rows[h].items():
            children[h, a] = c
        for k, pr in kid_probs[h].items():
            cprobs[h, k] = pr

    utility = np.array(utility)
    term = np.array(player) == TERMINAL
    urange = utility[term].max(axis=0) - utility[term].min(axis=0)
    if feature_fn is None:
        feats = np.eye(len(keys))
    else:
        feats = np.vstack(feats)

    return Game(
        name=name,
        action_names=tuple(rules.action_names),
        num_actions=num_actions,
        node_player=_readonly(np.array(player, dtype=np.int64)),
        node_parent=_readonly(np.array(parent, dtype=np.int64)),
        node_action=_readonly(np.array(action, dtype=np.int64)),
        node_depth=_readonly(np.array(depth, dtype=np.int64)),
        node_infoset=_readonly(np.array(infoset, dtype=np.int64)),
        node_chance_prob=_readonly(np.array(chance_prob)),
        node_utility=_readonly(utility),
        children=_readonly(children),
        chance_probs=_readonly(cprobs),
        history_labels=tuple(labels),
        infoset_player=_readonly(np.array(iset_player, dtype=np.int64)),
        infoset_keys=tuple(keys),
        infoset_members=tuple(_readonly(np.array(m, dtype=np.int64)) for m in members),
        infoset_depth=_readonly(np.array(iset_depth, dtype=np.int64)),
        legal_mask=_readonly(np.array(masks, dtype=bool).reshape(len(keys), num_actions)),
        infoset_features=_readonly(feats),
        utility_range=_readonly(urange),
    )
