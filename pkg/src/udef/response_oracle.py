"""Response oracles: exact tabular and neural (Q + reach + sampling-policy networks).

Both oracles produce an :class:`RoOutput`, the per-infoset bundle of action
values, reach estimates and baseline values that the pre-transform turns
into latent vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ._validation import ConfigurationError, ContractError, NumericalError, check_unit_interval
from .games import PolicyTable, infoset_reach, playout, reach_matrix, respond
from .games.evaluation import ReachDecomposition, greedy_actions
from .games.policy import as_probs
from .games.tree import CHANCE
from .nn import AdamState, Mlp, adam_step, soft_update


@dataclass
class RoOutput:
    """Per-infoset response-oracle outputs, indexed by global infoset id.

    Rows belonging to players listed in ``players`` are meaningful; others
    are zero.  ``sampling`` is the policy the baseline values were computed
    with, so ``bv = sum_a sampling * q`` on every filled row.
    """

    q: np.ndarray
    own: np.ndarray
    external: np.ndarray
    bv: np.ndarray
    sampling: np.ndarray
    greedy: np.ndarray
    players: tuple = (0, 1)

    def rp(self, infoset):
        own, ext = float(self.own[infoset]), float(self.external[infoset])
        return ReachDecomposition(own=own, external=ext, total=own * ext)

    def greedy_policy(self, game):
        """Pure argmax-Q rows for the oracle's players, uniform elsewhere."""
        probs = PolicyTable.uniform(game).probs
        rows = np.isin(game.infoset_player, self.players)
        probs[rows] = np.eye(game.num_actions)[self.greedy[rows]]
        return PolicyTable(game, probs, validate=False)

    def check_baseline(self, atol=1e-9):
        err = np.abs((self.sampling * self.q).sum(axis=1) - self.bv).max(initial=0.0)
        if err > atol:
            raise ContractError(f"baseline identity violated by {err}")
        return self

    @classmethod
    def merge(cls, game, outputs):
        """Joint output taking each player's rows from the oracle that owns them."""
        n, A = game.num_infosets, game.num_actions
        q, samp = np.zeros((n, A)), np.zeros((n, A))
        own, ext, bv = np.zeros(n), np.zeros(n), np.zeros(n)
        greedy = np.zeros(n, dtype=np.int64)
        players = []
        for out in outputs:
            for p in out.players:
                rows = game.infoset_player == p
                q[rows], samp[rows] = out.q[rows], out.sampling[rows]
                own[rows], ext[rows], bv[rows] = out.own[rows], out.external[rows], out.bv[rows]
                greedy[rows] = out.greedy[rows]
                players.append(p)
        return cls(q, own, ext, bv, samp, greedy, tuple(sorted(players)))


def sampling_policy(hs, historical, new_resp):
    """Per-infoset mixture ``(1 - hs) * historical + hs * new_resp``.

    Accepts PolicyTables (returns a PolicyTable) or raw probability arrays.
    """
    hs = check_unit_interval(hs, "hs")
    if isinstance(historical, PolicyTable):
        probs = (1.0 - hs) * historical.probs + hs * as_probs(historical.game, new_resp)
        return PolicyTable(historical.game, probs, validate=False)
    return (1.0 - hs) * np.asarray(historical, dtype=float) + hs * np.asarray(new_resp, dtype=float)


def tabular_ro(game, player, profile, hs=0.0, historical=None):
    """Exact response oracle for ``player`` against the opponent rows of ``profile``.

    Action values are conditional on reaching each infoset and use the
    continuation policy ``(1 - hs) * historical + hs * greedy`` below it
    (``historical`` defaults to ``profile``).  ``hs = 1`` gives best-response
    values; ``hs = 0`` on-policy values.  Reach is exact: ``own`` under the
    sampling policy, ``external`` summed over the infoset's histories.
    """
    hs = check_unit_interval(hs, "hs")
    probs = as_probs(game, profile)
    hist = probs if historical is None else as_probs(game, historical)
    res = respond(game, player, probs, historical=hist, hs=hs)
    sampling = np.where((game.infoset_player == player)[:, None], res.sampling, 0.0)
    joint = np.array(probs, dtype=float)
    rows = game.infoset_player == player
    joint[rows] = res.sampling[rows]
    own, _ = infoset_reach(game, joint, player)
    bv = (sampling * res.q).sum(axis=1)
    return RoOutput(
        q=res.q,
        own=own,
        external=res.external,
        bv=bv,
        sampling=sampling,
        greedy=np.where(rows, res.greedy, 0),
        players=(player,),
    )


# Experience ----------------------------------------------------------------


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    s_next: np.ndarray | None
    r: float
    rp_s: ReachDecomposition
    rp_s_next: ReachDecomposition
    legal_mask: np.ndarray
    legal_mask_next: np.ndarray | None


_INT_FIELDS = ("node", "next_node", "infoset", "next_infoset", "action", "episode")
_FLOAT_FIELDS = ("reward", "own", "ext", "own_next", "ext_next")
_RECORD = struct.Struct("<6q5d")


@dataclass
class Buffer:
    """Replay buffer of one player's transitions, stored column-wise.

    ``next_infoset`` is ``-1`` for transitions into a terminal history.
    Reach labels are the exact running products along each trajectory
    (``own`` for the player, ``ext`` for opponent and chance).
    """

    game: object
    player: int
    node: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    next_node: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    infoset: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    next_infoset: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    action: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    episode: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    reward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    own: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ext: np.ndarray = field(default_factory=lambda: np.zeros(0))
    own_next: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ext_next: np.ndarray = field(default_factory=lambda: np.zeros(0))
    capacity: int = 200_000

    def __len__(self):
        return len(self.node)

    @property
    def terminal(self):
        return self.next_infoset < 0

    def __getitem__(self, k):
        g = self.game
        term = self.next_infoset[k] < 0
        nxt = None if term else self.next_infoset[k]
        return Transition(
            s=g.infoset_features[self.infoset[k]],
            a=int(self.action[k]),
            s_next=None if term else g.infoset_features[nxt],
            r=float(self.reward[k]),
            rp_s=ReachDecomposition(self.own[k], self.ext[k], self.own[k] * self.ext[k]),
            rp_s_next=ReachDecomposition(self.own_next[k], self.ext_next[k], self.own_next[k] * self.ext_next[k]),
            legal_mask=g.legal_mask[self.infoset[k]],
            legal_mask_next=None if term else g.legal_mask[nxt],
        )

    def columns(self):
        return {name: getattr(self, name) for name in _INT_FIELDS + _FLOAT_FIELDS}

    def extend(self, other):
        """Append ``other``'s transitions, dropping the oldest beyond capacity."""
        cols = {k: np.concatenate([v, getattr(other, k)])[-self.capacity :] for k, v in self.columns().items()}
        return replace(self, **cols)

    def sample(self, rng, size):
        if len(self) == 0:
            raise ContractError("cannot sample from an empty buffer")
        return rng.integers(0, len(self), size=size)

    def dump(self, path):
        """Length-prefixed binary records, one per transition."""
        cols = self.columns()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qq", self.player, len(self)))
            for k in range(len(self)):
                rec = _RECORD.pack(*(int(cols[n][k]) for n in _INT_FIELDS), *(float(cols[n][k]) for n in _FLOAT_FIELDS))
                fh.write(struct.pack("<I", len(rec)))
                fh.write(rec)

    @classmethod
    def restore(cls, game, path, capacity=200_000):
        with open(path, "rb") as fh:
            player, n = struct.unpack("<qq", fh.read(16))
            rows = []
            for _ in range(n):
                (length,) = struct.unpack("<I", fh.read(4))
                rows.append(_RECORD.unpack(fh.read(length)))
        arr = np.array(rows, dtype=object).reshape(n, len(_INT_FIELDS) + len(_FLOAT_FIELDS))
        cols = {}
        for j, name in enumerate(_INT_FIELDS):
            cols[name] = arr[:, j].astype(np.int64)
        for j, name in enumerate(_FLOAT_FIELDS):
            cols[name] = arr[:, len(_INT_FIELDS) + j].astype(float)
        return cls(game, player, capacity=capacity, **cols)


def simulate(game, player, profile, episodes, seed=None, episode_offset=0):
    """Roll out ``episodes`` trajectories and collect ``player``'s transitions.

    ``profile`` is the joint sampling profile.  Each of the player's
    decisions becomes one transition to its next decision (or to the
    terminal, carrying the terminal payoff as reward).
    """
    if int(episodes) < 1:
        raise ContractError("simulate needs at least one episode")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    probs = as_probs(game, profile)
    term, path = playout(game, probs, int(episodes), rng, record=True)
    r = reach_matrix(game, probs)
    own_n = r[:, player]
    ext_n = r[:, 1 - player] * r[:, CHANCE]

    W = path.shape[1]
    safe = np.where(path >= 0, path, 0)
    mine = (path >= 0) & (game.node_player[safe] == player)
    flat = np.flatnonzero(mine.ravel())
    ep = flat // W
    node = path.ravel()[flat]
    child = path.ravel()[flat + 1]
    nxt_pos = np.append(flat[1:], -1)
    same = np.append(ep[1:] == ep[:-1], False)
    next_node = np.where(same, path.ravel()[np.where(nxt_pos >= 0, nxt_pos, 0)], term[ep])
    next_infoset = np.where(same, game.node_infoset[next_node], -1)
    reward = np.where(same, 0.0, game.node_utility[next_node, player])
    return Buffer(
        game=game,
        player=player,
        node=node,
        next_node=next_node,
        infoset=game.node_infoset[node],
        next_infoset=next_infoset,
        action=game.node_action[child],
        episode=ep + int(episode_offset),
        reward=reward,
        own=own_n[node],
        ext=ext_n[node],
        own_next=own_n[next_node],
        ext_next=ext_n[next_node],
    )


# Neural oracle ----------------------------------------------------------------


@dataclass
class RoHyper:
    """Training budget and architecture of the neural response oracle."""

    q_hidden: int = 256
    rp_hidden: int = 64
    policy_hidden: int = 256
    lr: float = 0.01
    batch_size: int = 128
    episodes: int = 1000
    rounds: int = 4
    q_steps: int = 50
    rp_steps: int = 50
    distill_epochs: int = 5
    tau: float = 0.9
    eps_start: float = 0.06
    eps_end: float = 0.001
    capacity: int = 200_000

    def __post_init__(self):
        if self.episodes < 1 or self.rounds < 1:
            raise ConfigurationError("episodes and rounds must be positive")
        check_unit_interval(self.tau, "tau")


@dataclass
class RoNetworks:
    """Networks of one player's neural response oracle.

    Q values are learnt in units of the game's utility range and rescaled
    on output.
    """

    q_online: Mlp
    q_target: Mlp
    rp_net: Mlp
    policy: Mlp
    pending: Mlp
    opt_q: AdamState
    opt_rp: AdamState
    opt_pending: AdamState
    scale: float = 1.0

    @classmethod
    def create(cls, game, hyper=None, seed=0):
        hyper = hyper or RoHyper()
        rng = np.random.default_rng(seed)
        f, A = game.num_features, game.num_actions
        q = Mlp([f, hyper.q_hidden, A], seed=rng)
        rp = Mlp([f, hyper.rp_hidden, 2], seed=rng)
        pol = Mlp([f, hyper.policy_hidden, A], output="softmax", seed=rng)
        pending = pol.copy()
        return cls(
            q_online=q,
            q_target=q.copy(),
            rp_net=rp,
            policy=pol,
            pending=pending,
            opt_q=AdamState.for_net(q, lr=hyper.lr),
            opt_rp=AdamState.for_net(rp, lr=hyper.lr),
            opt_pending=AdamState.for_net(pending, lr=hyper.lr),
            scale=float(max(game.utility_range.max(), 1e-12)),
        )

    def output(self, game, player):
        """Evaluate every infoset of ``player``; returns an :class:`RoOutput`."""
        rows = game.infosets_of(player)
        x = game.infoset_features[rows]
        mask = game.legal_mask[rows]
        n, A = game.num_infosets, game.num_actions
        q, samp = np.zeros((n, A)), np.zeros((n, A))
        own, ext = np.zeros(n), np.zeros(n)
        q[rows] = np.where(mask, self.q_online.forward(x) * self.scale, 0.0)
        rp = np.clip(self.rp_net.forward(x), 0.0, 1.0)
        own[rows], ext[rows] = rp[:, 0], rp[:, 1]
        samp[rows] = self.policy.forward(x, mask)
        for arr in (q, own, ext, samp):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("response oracle network produced non-finite output")
        greedy = np.zeros(n, dtype=np.int64)
        greedy[rows] = greedy_actions(q[rows], mask, self.scale)
        bv = (samp * q).sum(axis=1)
        return RoOutput(q, own, ext, bv, samp, greedy, (player,))


def train_ro(game, nets, buffer, hyper, rng, sampling_probs):
    """One training pass of Q, reach and policy networks on ``buffer``.

    Order: distil the sampling policy into the pending network, fit Q by
    expected-value TD against the frozen policy network, soft-update the
    target, fit the reach network, then promote the pending network.
    """
    if len(buffer) == 0:
        raise ContractError("train_ro needs a nonempty buffer")
    feats = game.infoset_features
    mask_all = game.legal_mask
    frozen = nets.policy.checksum()
    stats = {}

    # distillation of the sampling policy at visited infosets
    seen = np.unique(buffer.infoset)
    xs, ms, ts = feats[seen], mask_all[seen], sampling_probs[seen]
    counts = np.bincount(buffer.infoset, minlength=game.num_infosets)[seen].astype(float)
    losses = []
    for _ in range(hyper.distill_epochs):
        order = rng.permutation(len(seen))
        total = 0.0
        for start in range(0, len(seen), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grads = nets.pending.loss_and_grads(xs[idx], ts[idx], "distribution-mse", ms[idx], counts[idx])
            adam_step(nets.pending, grads, nets.opt_pending)
            total += loss * len(idx)
        losses.append(total / len(seen))
    stats["distill_loss"] = losses

    # expected-value TD on the Q network
    q_losses = []
    for _ in range(hyper.q_steps):
        idx = buffer.sample(rng, hyper.batch_size)
        s = buffer.infoset[idx]
        nxt = buffer.next_infoset[idx]
        live = nxt >= 0
        boot = np.zeros(len(idx))
        if live.any():
            xn = feats[nxt[live]]
            mn = mask_all[nxt[live]]
            zeta = nets.policy.forward(xn, mn)
            boot[live] = (zeta * np.where(mn, nets.q_target.forward(xn), 0.0)).sum(axis=1)
        y = buffer.reward[idx] / nets.scale + boot
        out, cache = nets.q_online.forward_cache(feats[s])
        a = buffer.action[idx]
        diff = out[np.arange(len(idx)), a] - y
        g = np.zeros_like(out)
        g[np.arange(len(idx)), a] = 2.0 * diff / len(idx)
        grads, _ = nets.q_online.backward(cache, g)
        adam_step(nets.q_online, grads, nets.opt_q)
        q_losses.append(float(np.mean(diff**2)))
    stats["q_loss"] = q_losses
    soft_update(nets.q_target, nets.q_online, hyper.tau)

    # reach network on both ends of each transition
    rp_losses = []
    for _ in range(hyper.rp_steps):
        idx = buffer.sample(rng, hyper.batch_size)
        live = idx[buffer.next_infoset[idx] >= 0]
        x = np.vstack([feats[buffer.infoset[idx]], feats[buffer.next_infoset[live]]])
        y = np.vstack(
            [
                np.column_stack([buffer.own[idx], buffer.ext[idx]]),
                np.column_stack([buffer.own_next[live], buffer.ext_next[live]]),
            ]
        )
        loss, grads = nets.rp_net.loss_and_grads(x, y)
        adam_step(nets.rp_net, grads, nets.opt_rp)
        rp_losses.append(loss)
    stats["rp_loss"] = rp_losses

    if nets.policy.checksum() != frozen:
        raise ContractError("policy network changed during Q/RP training")
    nets.policy = nets.pending.copy()
    return nets, stats


def exploration_schedule(hyper):
    """Epsilon per round, decaying geometrically from ``eps_start`` to ``eps_end``."""
    if hyper.rounds == 1:
        return np.array([hyper.eps_start])
    return np.geomspace(hyper.eps_start, hyper.eps_end, hyper.rounds)


def neural_ro(game, player, nets, profile, hs, hyper, rng, new_response=None, historical=None, buffer=None):
    """Train ``player``'s oracle against the opponent rows of ``profile``.

    The player's sampling policy is ``(1 - hs) * historical + hs * new`` with
    epsilon-uniform exploration on top, where ``new`` is recomputed from the
    current networks each round through ``new_response(RoOutput) -> probs``
    (argmax Q by default).  ``buffer`` carries replay data over from earlier
    calls; the extended buffer is returned as ``stats["buffer"]``.  Returns
    ``(RoOutput, stats)``.
    """
    hs = check_unit_interval(hs, "hs")
    probs = np.array(as_probs(game, profile), dtype=float)
    hist = probs if historical is None else np.array(as_probs(game, historical), dtype=float)
    rows = game.infoset_player == player
    uniform = PolicyTable.uniform(game).probs
    per_round = max(1, int(hyper.episodes) // int(hyper.rounds))
    if buffer is None:
        buffer = Buffer(game, player, capacity=hyper.capacity)
    elif buffer.player != player:
        raise ContractError(f"buffer holds player {buffer.player}'s transitions, not player {player}'s")
    first = int(buffer.episode.max()) + 1 if len(buffer) else 0
    history = []
    for k, eps in enumerate(exploration_schedule(hyper)):
        out = nets.output(game, player)
        if new_response is None:
            new = out.greedy_policy(game).probs
        else:
            new = np.asarray(new_response(out), dtype=float)
        mix = sampling_policy(hs, hist, new)
        sampling = np.array(probs)
        sampling[rows] = (1.0 - eps) * mix[rows] + eps * uniform[rows]
        buffer = buffer.extend(simulate(game, player, sampling, per_round, rng, episode_offset=first + k * per_round))
        nets, stats = train_ro(game, nets, buffer, hyper, rng, sampling)
        history.append(stats)
    return nets.output(game, player), {"rounds": history, "buffer_size": len(buffer), "buffer": buffer}
