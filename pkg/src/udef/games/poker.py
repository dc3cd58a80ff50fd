"""Kuhn and Leduc poker rules for :func:`udef.games.build_from_rules`."""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import permutations

import numpy as np

from .tree import CHANCE

RANKS = "JQK"


class KuhnRules:
    """Three-card Kuhn poker, antes of 1 and a single bet of 1.

    Both private cards are dealt by one chance move (six ordered deals of
    probability 1/6).  States are ``(deal, history)`` tuples where history
    is a string over ``p`` (pass) and ``b`` (bet).
    """

    action_names = ["p", "b"]
    _decision_points = ("", "p", "b", "pb")

    def initial_state(self):
        return (None, "")

    def is_terminal(self, state):
        deal, hist = state
        return deal is not None and hist in ("pp", "pbp", "pbb", "bp", "bb")

    def current_player(self, state):
        deal, hist = state
        if deal is None:
            return CHANCE
        return len(hist) % 2

    def chance_outcomes(self, state):
        return [(d, 1.0 / 6.0) for d in permutations(range(3), 2)]

    def outcome_label(self, deal):
        return RANKS[deal[0]] + RANKS[deal[1]]

    def legal_actions(self, state):
        return [0, 1]

    def next_state(self, state, a):
        deal, hist = state
        if deal is None:
            return (a, "")
        return (deal, hist + self.action_names[a])

    def returns(self, state):
        (c0, c1), hist = state
        if hist == "pbp":
            return (-1.0, 1.0)
        if hist == "bp":
            return (1.0, -1.0)
        stake = 1.0 if hist == "pp" else 2.0
        win = stake if c0 > c1 else -stake
        return (win, -win)

    def infoset_key(self, state, player):
        deal, hist = state
        return f"{RANKS[deal[player]]}{hist}"

    def infoset_features(self, state, player):
        deal, hist = state
        x = np.zeros(3 + len(self._decision_points))
        x[deal[player]] = 1.0
        x[3 + self._decision_points.index(hist)] = 1.0
        return x


@dataclass(frozen=True)
class _LeducState:
    private: tuple = ()
    public: int | None = None
    rounds: tuple = ("",)
    contrib: tuple = (1.0, 1.0)
    folded: int | None = None


class LeducRules:
    """Leduc hold'em with the usual research ruleset.

    Six cards (two suits of J, Q, K), antes of 1, two betting rounds with
    raise sizes 2 and 4 and at most two raises per round.  Cards are dealt
    by rank; the chance probabilities account for the remaining copies of
    each rank.  A pair with the public card wins, otherwise the higher rank
    wins and equal ranks split.
    """

    action_names = ["f", "c", "r"]
    raise_sizes = (2.0, 4.0)
    max_raises = 2
    _slots = 4

    def initial_state(self):
        return _LeducState()

    def _round_over(self, hist):
        return len(hist) >= 2 and hist[-1] == "c"

    def is_terminal(self, s):
        if s.folded is not None:
            return True
        return len(s.rounds) == 2 and self._round_over(s.rounds[1])

    def current_player(self, s):
        if len(s.private) < 2:
            return CHANCE
        if s.public is None and self._round_over(s.rounds[0]):
            return CHANCE
        return len(s.rounds[-1]) % 2

    def _remaining(self, s):
        counts = [2, 2, 2]
        for c in s.private:
            counts[c] -= 1
        if s.public is not None:
            counts[s.public] -= 1
        return counts

    def chance_outcomes(self, s):
        counts = self._remaining(s)
        total = sum(counts)
        return [(r, counts[r] / total) for r in range(3) if counts[r] > 0]

    def outcome_label(self, r):
        return RANKS[r]

    def legal_actions(self, s):
        hist = s.rounds[-1]
        acts = []
        if s.contrib[0] != s.contrib[1]:
            acts.append(0)
        acts.append(1)
        if hist.count("r") < self.max_raises:
            acts.append(2)
        return acts

    def next_state(self, s, a):
        if len(s.private) < 2:
            return replace(s, private=s.private + (a,))
        if s.public is None and self._round_over(s.rounds[0]):
            return replace(s, public=a, rounds=(s.rounds[0], ""))
        p = len(s.rounds[-1]) % 2
        contrib = list(s.contrib)
        if a == 0:
            return replace(s, rounds=s.rounds[:-1] + (s.rounds[-1] + "f",), folded=p)
        if a == 1:
            contrib[p] = contrib[1 - p]
        else:
            contrib[p] = contrib[1 - p] + self.raise_sizes[len(s.rounds) - 1]
        return replace(s, rounds=s.rounds[:-1] + (s.rounds[-1] + self.action_names[a],), contrib=tuple(contrib))

    def returns(self, s):
        if s.folded is not None:
            loss = s.contrib[s.folded]
            return (-loss, loss) if s.folded == 0 else (loss, -loss)
        c0, c1 = s.private
        if c0 == s.public:
            sign = 1.0
        elif c1 == s.public:
            sign = -1.0
        else:
            sign = float(np.sign(c0 - c1))
        pot = s.contrib[0]
        return (sign * pot, -sign * pot)

    def infoset_key(self, s, player):
        public = "?" if s.public is None else RANKS[s.public]
        return f"{RANKS[s.private[player]]}{public}:{'/'.join(s.rounds)}"

    def infoset_features(self, s, player):
        x = np.zeros(6 + 2 * self._slots * 3)
        x[s.private[player]] = 1.0
        if s.public is not None:
            x[3 + s.public] = 1.0
        for r, hist in enumerate(s.rounds):
            for k, ch in enumerate(hist):
                x[6 + (r * self._slots + k) * 3 + self.action_names.index(ch)] = 1.0
        return x
