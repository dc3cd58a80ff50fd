"""Behavioural strategies stored as dense per-infoset probability rows."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .._validation import ContractError, IncompletePolicyError

POLICY_ATOL = 1e-9


class PolicyTable(Mapping):
    """Mapping from infoset id to a distribution over that infoset's legal actions.

    The table covers every infoset of the game (both players), which lets a
    single object act as a joint profile.  ``probs`` has shape
    ``(num_infosets, num_actions)`` with zeros on illegal actions; indexing
    returns the legal entries only.
    """

    def __init__(self, game, probs, validate=True):
        probs = np.array(probs, dtype=float)
        if probs.shape != (game.num_infosets, game.num_actions):
            raise ContractError(
                f"policy shape {probs.shape} does not match game ({game.num_infosets}, {game.num_actions})"
            )
        self.game = game
        self.probs = probs
        if validate:
            self.validate()

    @classmethod
    def uniform(cls, game):
        mask = game.legal_mask.astype(float)
        return cls(game, mask / mask.sum(axis=1, keepdims=True), validate=False)

    @classmethod
    def from_mapping(cls, game, mapping):
        """Build from ``{infoset_id: vector over legal actions}``.

        Raises :class:`IncompletePolicyError` when an infoset is missing.
        """
        probs = np.zeros((game.num_infosets, game.num_actions))
        for i in range(game.num_infosets):
            if i not in mapping:
                raise IncompletePolicyError(f"policy has no entry for infoset {i} ({game.infoset_keys[i]})")
            row = np.asarray(mapping[i], dtype=float)
            legal = game.legal_actions(i)
            if row.shape != (len(legal),):
                raise ContractError(f"infoset {i} expects {len(legal)} probabilities, got {row.shape}")
            probs[i, legal] = row
        return cls(game, probs)

    @classmethod
    def combine(cls, game, per_player):
        """Joint profile taking player ``p``'s rows from ``per_player[p]``."""
        probs = np.zeros((game.num_infosets, game.num_actions))
        for p, table in enumerate(per_player):
            rows = game.infosets_of(p)
            probs[rows] = table.probs[rows]
        return cls(game, probs, validate=False)

    def validate(self, atol=POLICY_ATOL):
        mask = self.game.legal_mask
        if not np.all(np.isfinite(self.probs)):
            raise ContractError("policy contains non-finite probabilities")
        if np.any(self.probs < -atol) or np.any(np.abs(self.probs[~mask]) > atol):
            raise ContractError("policy has negative mass or mass on illegal actions")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=atol, rtol=0.0):
            raise ContractError("policy rows do not sum to one")
        return self

    def __getitem__(self, infoset):
        return self.probs[infoset, self.game.legal_mask[infoset]]

    def __iter__(self):
        return iter(range(self.game.num_infosets))

    def __len__(self):
        return self.game.num_infosets

    def copy(self):
        return PolicyTable(self.game, self.probs.copy(), validate=False)

    def __repr__(self):
        return f"PolicyTable(game={self.game.name!r}, infosets={len(self)})"


def as_probs(game, profile):
    """Dense ``(num_infosets, num_actions)`` array for a profile.

    ``profile`` may be a :class:`PolicyTable`, a raw array, or a pair of
    per-player tables.
    """
    if isinstance(profile, PolicyTable):
        return profile.probs
    if isinstance(profile, (tuple, list)) and len(profile) == 2 and all(isinstance(p, PolicyTable) for p in profile):
        return PolicyTable.combine(game, profile).probs
    if isinstance(profile, Mapping):
        return PolicyTable.from_mapping(game, profile).probs
    probs = np.asarray(profile, dtype=float)
    if probs.shape != (game.num_infosets, game.num_actions):
        raise ContractError("profile array has the wrong shape")
    return probs


def normalize_rows(values, mask):
    """Renormalise nonnegative rows over ``mask``; all-zero rows become uniform."""
    values = np.where(mask, np.maximum(values, 0.0), 0.0)
    total = values.sum(axis=-1, keepdims=True)
    uniform = mask / mask.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0.0, values / np.where(total > 0.0, total, 1.0), uniform)
