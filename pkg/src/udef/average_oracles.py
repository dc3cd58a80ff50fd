"""Average oracles: weights over a population of responses.

Explicit oracles use fixed schemes (uniform, linear, last) or the Nash
equilibrium of the meta-game.  :class:`LearnedLao` is a small network
applied to every response with shared weights, followed by a softmax across
responses, so it handles any population size up to ``k_max`` and permuting
the responses (together with their iteration labels) permutes its output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ConfigurationError, ContractError
from .nn import AdamState, Mlp, adam_step, load_networks, save_networks
from .tabular import MetaGame, meta_solve, scheme_weights, solve_zero_sum, solve_zero_sum_batch

AO_SCHEMES = ("uniform", "linear", "last", "nash")
K_MAX = 64
NASH_LABEL_STEPS = 10_000
# regret-matching steps unrolled inside the learned oracle's feature layer
UNROLL_STEPS = 128
_LOG_EPS = 1e-3


@dataclass
class AoWeights:
    """Per-player weights over that player's responses."""

    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        for w in (self.row, self.col):
            if w.size and (w.min() < 0.0 or abs(w.sum() - 1.0) > 1e-9):
                raise ContractError("average-oracle weights must form a distribution")

    def __getitem__(self, player):
        return self.row if player == 0 else self.col


def _payoffs(meta):
    """Payoff matrix plus iteration labels; a bare matrix is labelled ``1..K``."""
    if isinstance(meta, MetaGame):
        return meta.payoff_matrix, np.asarray(meta.row_iterations, float), np.asarray(meta.col_iterations, float)
    A = np.asarray(meta, dtype=float)
    return A, np.arange(1.0, A.shape[0] + 1), np.arange(1.0, A.shape[1] + 1)


def label_weights(scheme, labels):
    """Uniform, linear-in-label or latest-label weights over responses.

    Linear weights are proportional to the iteration label, so a response
    from iteration 0 gets no weight; if every label is 0 the weights fall
    back to uniform.
    """
    labels = np.asarray(labels, dtype=float)
    k = len(labels)
    if k < 1:
        raise ContractError("weights need at least one item")
    if scheme == "uniform":
        return np.full(k, 1.0 / k)
    if scheme == "linear":
        total = labels.sum()
        return labels / total if total > 0 else np.full(k, 1.0 / k)
    if scheme == "last":
        w = np.zeros(k)
        w[k - 1 - int(np.argmax(labels[::-1]))] = 1.0
        return w
    raise ConfigurationError(f"unknown weighting scheme {scheme!r}")


def explicit_ao(scheme, meta):
    """Weights for both players under a fixed scheme or the meta-game's Nash equilibrium."""
    if scheme not in AO_SCHEMES:
        raise ConfigurationError(f"unknown average-oracle scheme {scheme!r}")
    A, rows, cols = _payoffs(meta)
    if min(A.shape) < 1:
        raise ContractError("average oracle needs at least one response per player")
    if scheme == "nash":
        x, y = meta_solve(A, "nash")
    else:
        x, y = label_weights(scheme, rows), label_weights(scheme, cols)
    return AoWeights(x, y)


def aggregate_las(latents, weights, masks=None):
    """Weighted sum ``sum_k w_k * latents[k]`` of per-infoset latent arrays.

    ``masks``, if given, holds each response's legal-action masks and must
    agree across responses.
    """
    latents = np.asarray(latents, dtype=float)
    w = np.asarray(weights, dtype=float)
    if latents.shape[0] != len(w):
        raise ContractError(f"{latents.shape[0]} latents but {len(w)} weights")
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if np.any(masks != masks[:1]):
            raise ContractError("latents to aggregate have different legal masks")
    return np.tensordot(w, latents, axes=1)


# Learned oracle ------------------------------------------------------------


def lao_features(P, iterations=None, unroll=UNROLL_STEPS):
    """Per-response features for the player whose payoffs are the rows of ``P``.

    Payoffs are scaled by their largest magnitude.  Columns: log and linear
    normalised iteration label, last-response flag, centred mean payoff,
    best and worst payoff, advantage against the opponent's mixture from a
    short regret-matching unroll, and that unroll's own weights.
    """
    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    it = np.arange(1.0, K + 1) if iterations is None else np.asarray(iterations, dtype=float)
    # iteration 0 (the initial policy) is floored at half a step
    t = np.maximum(it, 0.5) / max(it.max(), 1.0)
    s = np.abs(P).max()
    Pn = P / s if s > 0 else P
    x, y = solve_zero_sum(Pn, steps=unroll)
    v = Pn @ y
    mean = Pn.mean(axis=1)
    return np.column_stack(
        [
            np.log(t),
            t,
            (it == it.max()).astype(float),
            mean - mean.mean(),
            Pn.max(axis=1),
            Pn.min(axis=1),
            v - x @ v,
            np.log(x + _LOG_EPS),
            x * K,
        ]
    )


NUM_LAO_FEATURES = 9


def _segment_softmax(z, seg, n_seg):
    zmax = np.full(n_seg, -np.inf)
    np.maximum.at(zmax, seg, z)
    e = np.exp(z - zmax[seg])
    tot = np.bincount(seg, weights=e, minlength=n_seg)
    return e / tot[seg]


class LearnedLao:
    """Response-wise MLP plus a softmax across responses."""

    def __init__(self, hidden=32, k_max=K_MAX, unroll=UNROLL_STEPS, seed=0):
        self.k_max = int(k_max)
        self.unroll = int(unroll)
        self.net = Mlp([NUM_LAO_FEATURES, hidden, hidden, 1], seed=seed)
        self.target = None

    @property
    def params(self):
        return self.net.params

    def weights_from_features(self, feats):
        return _segment_softmax(self.net.forward(feats)[:, 0], np.zeros(len(feats), np.int64), 1)

    def weights(self, P, iterations=None):
        """Weights over the rows of ``P`` (payoffs of the player being averaged)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[0] > self.k_max:
            raise ContractError(f"{P.shape[0]} responses exceed the oracle's maximum of {self.k_max}")
        if P.shape[0] == 1:
            return np.ones(1)
        return self.weights_from_features(lao_features(P, iterations, self.unroll))

    def save(self, path):
        save_networks(path, {"lao": self.net}, {"k_max": self.k_max, "unroll": self.unroll, "target": self.target})

    @classmethod
    def load(cls, path):
        nets, meta = load_networks(path)
        out = cls(hidden=nets["lao"].layer_sizes[1], k_max=meta["k_max"], unroll=meta["unroll"])
        out.net = nets["lao"]
        out.target = meta.get("target")
        return out


def learned_lao_eval(lao, meta):
    """Both players' weights from a learned oracle."""
    A, rows, cols = _payoffs(meta)
    return AoWeights(lao.weights(A, rows), lao.weights(-A.T, cols))


# Pretraining ---------------------------------------------------------------


@dataclass
class LaoDataset:
    """Random meta-games with labels; ``matrices[i]`` is the averaged player's payoff matrix."""

    scheme: str
    seed: int
    matrices: list
    labels: list

    def __len__(self):
        return len(self.matrices)

    def save(self, path):
        sizes = np.array([m.shape for m in self.matrices], dtype=np.int64).reshape(-1, 2)
        np.savez(
            path,
            scheme=np.array(self.scheme),
            seed=np.array(self.seed),
            sizes=sizes,
            payoffs=np.concatenate([m.ravel() for m in self.matrices]) if self.matrices else np.zeros(0),
            labels=np.concatenate(self.labels) if self.labels else np.zeros(0),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            sizes, flat, lab = z["sizes"], z["payoffs"], z["labels"]
            out = cls(str(z["scheme"]), int(z["seed"]), [], [])
        a = b = 0
        for r, c in sizes:
            out.matrices.append(flat[a : a + r * c].reshape(r, c))
            out.labels.append(lab[b : b + r])
            a += r * c
            b += r
        return out


def generate_lao_dataset(n_games, scheme, k_max=K_MAX, seed=0, nash_steps=NASH_LABEL_STEPS):
    """Random square zero-sum games with ``K ~ U[2, k_max]`` and explicit-scheme labels.

    Nash labels come from the regret-matching solver, run in batches of
    equally sized games.
    """
    if scheme not in AO_SCHEMES:
        raise ConfigurationError(f"unknown average-oracle scheme {scheme!r}")
    if int(n_games) < 1:
        raise ContractError("need at least one game")
    rng = np.random.default_rng(seed)
    ks = rng.integers(2, int(k_max) + 1, size=int(n_games))
    mats = [rng.uniform(-1.0, 1.0, size=(k, k)) for k in ks]
    labels = [None] * len(mats)
    if scheme == "nash":
        for k in np.unique(ks):
            idx = np.flatnonzero(ks == k)
            x, _ = solve_zero_sum_batch(np.stack([mats[i] for i in idx]), steps=nash_steps)
            for j, i in enumerate(idx):
                labels[i] = x[j]
    else:
        labels = [scheme_weights(scheme, len(m)) for m in mats]
    return LaoDataset(scheme, int(seed), mats, labels)


def _stack(dataset, idx, feats):
    f = np.vstack([feats[i] for i in idx])
    y = np.concatenate([dataset.labels[i] for i in idx])
    seg = np.concatenate([np.full(len(dataset.labels[i]), j) for j, i in enumerate(idx)])
    return f, y, seg


def lao_heldout_l1(lao, dataset, feats=None):
    """Mean per-game L1 distance between the oracle's weights and the labels."""
    feats = feats or [lao_features(m, unroll=lao.unroll) for m in dataset.matrices]
    return float(np.mean([np.abs(lao.weights_from_features(f) - y).sum() for f, y in zip(feats, dataset.labels)]))


def pretrain_lao(lao, target, n_games=2000, steps=2000, batch_games=32, lr=3e-3, seed=0, dataset=None, heldout=200):
    """Fit ``lao`` to the explicit ``target`` scheme on random meta-games.

    Loss is squared error between weight vectors, summed over responses and
    averaged over games.  Returns ``(lao, report)`` with the held-out L1.
    """
    if dataset is None:
        dataset = generate_lao_dataset(n_games, target, lao.k_max, seed)
    if dataset.scheme != target:
        raise ConfigurationError(f"dataset labels are {dataset.scheme!r}, not {target!r}")
    rng = np.random.default_rng(seed)
    feats = [lao_features(m, unroll=lao.unroll) for m in dataset.matrices]
    opt = AdamState.for_net(lao.net, lr=lr)
    trace = np.zeros(int(steps))
    for step in range(int(steps)):
        idx = rng.integers(0, len(dataset), size=min(batch_games, len(dataset)))
        f, y, seg = _stack(dataset, idx, feats)
        z, cache = lao.net.forward_cache(f)
        w = _segment_softmax(z[:, 0], seg, len(idx))
        diff = w - y
        trace[step] = float((diff**2).sum() / len(idx))
        gw = 2.0 * diff / len(idx)
        gz = w * (gw - np.bincount(seg, weights=gw * w, minlength=len(idx))[seg])
        grads, _ = lao.net.backward(cache, gz[:, None])
        adam_step(lao.net, grads, opt)
    lao.target = target
    held = generate_lao_dataset(heldout, target, lao.k_max, seed + 1_000_003)
    return lao, {"loss": trace, "heldout_l1": lao_heldout_l1(lao, held)}
