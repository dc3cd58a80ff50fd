"""The unified equilibrium-finding loop.

Each iteration averages the stored responses in the latent space with the
local average oracle (LAO), maps the average to a policy with the
post-transform, asks the response oracle for a new response against that
policy, and evaluates the global-average-oracle (GAO) policy.  Presets wire
explicit modules so that the loop reproduces CFR, linear CFR, fictitious
play and PSRO exactly.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, ContractError, check_unit_interval
from .average_oracles import AO_SCHEMES, AoWeights, LearnedLao, explicit_ao, label_weights, lao_features
from .games import (
    PolicyTable,
    best_response,
    infoset_reach,
    mixture_policy,
    nash_conv,
    realization_weights,
)
from .nn import AdamState, adam_step, softmax_backward
from .response_oracle import RoHyper, RoNetworks, RoOutput, neural_ro, tabular_ro
from .tabular import MetaGame, augment_meta_game
from .transforms import POST_KINDS, PRE_KINDS, TransformPair

PRESETS = ("nfsp", "psro_nash", "cfr", "lcfr")
SAMPLING_SOURCES = ("new_response", "historical", "mixed")
AO_CHOICES = AO_SCHEMES + ("learned",)
LOG_COLUMNS = ("iteration", "nash_conv_total", "nash_conv_p1", "nash_conv_p2", "meta_loss")
TIMING_COLUMNS = ("iteration", "wall_ms")


@dataclass
class UdefConfig:
    """Every knob of one run.  Budgets default to the full-scale values."""

    ro_mode: str = "tabular"
    lao: str = "uniform"
    gao: str = "uniform"
    pre: str = "explicit_cfr"
    post: str = "explicit_regret_matching"
    temperature: float = 1.0
    active_block: str = "cfr"
    hs: float = 0.0
    sampling_source: str = "historical"
    eta: float = 0.95
    meta_lr: float = 1e-4
    meta_steps: int = 0
    meta_train: int = 1
    meta_train_max: int = 0
    reach_weighted: bool = True
    max_iterations: int = 50
    threshold: float | None = None
    episodes_ro: int = 10_000
    episodes_meta: int = 1000
    meta_estimation: str = "exact"
    las_dim: int = 16
    ro_rounds: int = 4
    ro_q_steps: int = 50
    ro_rp_steps: int = 50
    ro_hidden: int = 256
    ro_lr: float = 0.01
    ro_eps_start: float = 0.2
    ro_eps_end: float = 0.05
    ro_keep_buffer: bool = True
    ro_capacity: int = 200_000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def effective_hs(self):
        """hs is the weight of the new response; named sampling sources pin it."""
        if self.sampling_source == "new_response":
            return 1.0
        if self.sampling_source == "historical":
            return 0.0
        return self.hs

    def validate(self):
        if self.ro_mode not in ("tabular", "neural"):
            raise ConfigurationError(f"unknown ro_mode {self.ro_mode!r}")
        for name in ("lao", "gao"):
            if getattr(self, name) not in AO_CHOICES:
                raise ConfigurationError(f"unknown {name} {getattr(self, name)!r}")
        if self.pre not in PRE_KINDS or self.post not in POST_KINDS:
            raise ConfigurationError(f"unknown transform pair {self.pre!r}/{self.post!r}")
        if self.sampling_source not in SAMPLING_SOURCES:
            raise ConfigurationError(f"unknown sampling source {self.sampling_source!r}")
        if self.meta_estimation not in ("exact", "sampled"):
            raise ConfigurationError(f"unknown meta-game estimation {self.meta_estimation!r}")
        check_unit_interval(self.hs, "hs")
        check_unit_interval(self.eta, "eta")
        check_unit_interval(self.ro_eps_start, "ro_eps_start")
        check_unit_interval(self.ro_eps_end, "ro_eps_end")
        for name in ("episodes_ro", "episodes_meta", "ro_rounds", "ro_capacity"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("max_iterations", "meta_steps", "meta_train_max", "meta_train"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.temperature < 0 or self.meta_lr < 0:
            raise ConfigurationError("temperature and meta_lr must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        out = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            out[key] = _coerce(known[key], value)
        return cls(**out)

    def scaled(self, factor):
        """Copy with episode budgets multiplied by ``factor`` (at least 1)."""
        return replace(
            self,
            episodes_ro=max(1, int(round(self.episodes_ro * factor))),
            episodes_meta=max(1, int(round(self.episodes_meta * factor))),
        )


def _coerce(f, value):
    if not isinstance(value, str):
        return value
    kind = str(f.type)
    if value.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigurationError(f"{f.name} expects a boolean, got {value!r}")
    try:
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
    except ValueError as err:
        raise ConfigurationError(f"{f.name} expects a number, got {value!r}") from err
    return value


def preset(name, **overrides):
    """Configurations reproducing NFSP, PSRO with a Nash meta-solver, CFR and linear CFR."""
    table = {
        "nfsp": dict(
            lao="uniform",
            gao="last",
            pre="explicit_psro",
            post="explicit_identity_renorm",
            temperature=0.0,
            sampling_source="new_response",
        ),
        "psro_nash": dict(
            lao="nash",
            gao="uniform",
            pre="explicit_psro",
            post="explicit_identity_renorm",
            temperature=0.0,
            sampling_source="new_response",
        ),
        "cfr": dict(
            lao="uniform",
            gao="uniform",
            pre="explicit_cfr",
            post="explicit_regret_matching",
            sampling_source="historical",
        ),
        "lcfr": dict(
            lao="linear",
            gao="linear",
            pre="explicit_cfr",
            post="explicit_regret_matching",
            sampling_source="historical",
        ),
    }
    if name not in table:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return UdefConfig(**{**table[name], **overrides})


# Run log -------------------------------------------------------------------


@dataclass
class RunLog:
    """Per-iteration exploitability of the evaluation policy plus meta-losses.

    ``averaged[t]`` is the LAO policy the iteration-``t+1`` responses were
    computed against; ``policies[t]`` the GAO evaluation policy.
    """

    config: dict
    seed: int
    utility_range: float = 1.0
    rows: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    meta_losses: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    averaged: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def nash_conv(self):
        return np.array([r["nash_conv_total"] for r in self.rows])

    def append(self, iteration, nc, meta_loss, wall_ms):
        if nc.total < -1e-9:
            raise ContractError(f"negative NashConv {nc.total}")
        self.rows.append(
            {
                "iteration": int(iteration),
                "nash_conv_total": float(nc.total),
                "nash_conv_p1": float(nc.per_player[0]),
                "nash_conv_p2": float(nc.per_player[1]),
                "meta_loss": None if meta_loss is None else float(meta_loss),
            }
        )
        self.wall_ms.append(float(wall_ms))

    def to_csv(self, path):
        """Deterministic CSV with a ``#`` config line; wall times go to a sidecar file."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write("# config: " + json.dumps({**self.config, "seed": self.seed}, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        with open(timing_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_COLUMNS)
            for r, ms in zip(self.rows, self.wall_ms):
                w.writerow([r["iteration"], f"{ms:.3f}"])
        return path

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# config: "):
                raise ContractError(f"{path} has no config header")
            config = json.loads(first[len("# config: ") :])
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
                raise ContractError(f"{path} has columns {reader.fieldnames}, expected {LOG_COLUMNS}")
            rows = [
                {
                    "iteration": int(r["iteration"]),
                    "nash_conv_total": float(r["nash_conv_total"]),
                    "nash_conv_p1": float(r["nash_conv_p1"]),
                    "nash_conv_p2": float(r["nash_conv_p2"]),
                    "meta_loss": None if r["meta_loss"] == "" else float(r["meta_loss"]),
                }
                for r in reader
            ]
        seed = int(config.pop("seed", 0))
        return cls(config=config, seed=seed, rows=rows)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def timing_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".timing.csv")


def termination_oracle(log, cfg):
    """Stop once NashConv reaches the threshold (default ``1e-3 * utility range``) or the cap."""
    if len(log) == 0:
        raise ContractError("termination oracle needs at least one logged iteration")
    threshold = 1e-3 * log.utility_range if cfg.threshold is None else cfg.threshold
    return log.rows[-1]["nash_conv_total"] <= threshold or len(log) >= cfg.max_iterations


# Modules -------------------------------------------------------------------


def positive_part_backward(x, mask, grad):
    """Gradient through ``max(x, 0) / sum(max(x, 0))`` (uniform, hence flat, when the sum is 0)."""
    pos = np.where(mask, np.maximum(x, 0.0), 0.0)
    s = pos.sum(axis=1, keepdims=True)
    ok = s > 0.0
    p = pos / np.where(ok, s, 1.0)
    g = (grad - (grad * p).sum(axis=1, keepdims=True)) / np.where(ok, s, 1.0)
    return np.where(ok & (pos > 0.0), g, 0.0)


@dataclass
class UdefModules:
    """Transforms and average oracles of one run, plus their optimiser states."""

    transforms: TransformPair
    lao: LearnedLao | None = None
    gao: LearnedLao | None = None
    optimisers: dict = field(default_factory=dict)

    @classmethod
    def build(cls, game, cfg, transforms=None, lao=None, gao=None):
        A = game.num_actions
        if cfg.pre == "learned" or cfg.post == "learned":
            if transforms is None:
                if cfg.ro_mode == "neural":
                    raise ConfigurationError("learned transforms need a pretrained transform checkpoint")
                transforms = TransformPair(cfg.pre, cfg.post, A, cfg.las_dim, cfg.temperature, cfg.active_block)
            if (transforms.pre_kind, transforms.post_kind) != (cfg.pre, cfg.post):
                raise ConfigurationError("transform checkpoint does not match the configured pair")
            if transforms.num_actions != A:
                raise ConfigurationError("transform checkpoint was built for a different action count")
            transforms = transforms.copy()
            transforms.temperature = cfg.temperature
            transforms.active = cfg.active_block
        else:
            transforms = TransformPair(cfg.pre, cfg.post, A, cfg.las_dim, cfg.temperature, cfg.active_block)
        if cfg.lao == "learned" and lao is None:
            raise ConfigurationError("learned LAO needs a pretrained checkpoint")
        if cfg.gao == "learned" and gao is None:
            raise ConfigurationError("learned GAO needs a pretrained checkpoint")
        return cls(transforms, lao if cfg.lao == "learned" else None, gao if cfg.gao == "learned" else None)

    @property
    def trainable(self):
        return self.transforms.is_learned or self.lao is not None or self.gao is not None

    def optimiser(self, name, params, lr):
        if name not in self.optimisers:
            self.optimisers[name] = AdamState(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
        self.optimisers[name].lr = lr
        return self.optimisers[name]


class _Params:
    """Duck-typed parameter holder so :func:`adam_step` can update any parameter list."""

    def __init__(self, params):
        self.params = params


@dataclass
class UdefState:
    """Response population and history of averaged policies."""

    ros: list
    tables: list
    meta: MetaGame
    averaged: list = field(default_factory=list)
    sigma_meta: MetaGame | None = None
    meta_updates: int = 0
    latent_cache: list = field(default_factory=list)
    sigma_reach: list = field(default_factory=list)

    def add_averaged(self, game, sigma):
        self.averaged.append(sigma)
        self.sigma_reach.append(sum(realization_weights(game, sigma, p) for p in (0, 1)))


def _player_rows(game):
    return [game.infoset_player == 0, game.infoset_player == 1]


def _stack_ros(ros):
    return RoOutput(
        q=np.vstack([r.q for r in ros]),
        own=np.concatenate([r.own for r in ros]),
        external=np.concatenate([r.external for r in ros]),
        bv=np.concatenate([r.bv for r in ros]),
        sampling=np.vstack([r.sampling for r in ros]),
        greedy=np.concatenate([r.greedy for r in ros]),
    )


def compute_latents(game, modules, ros, cache=False):
    """Latents ``(K, n, d)`` of every stored response under the current pre-transform.

    The initial policy has no action values; under the explicit PSRO
    transform its latent is its realization-weighted policy, which a zero-Q
    argmax would not reproduce.
    """
    n = game.num_infosets
    mask = np.tile(game.legal_mask, (len(ros), 1))
    out = modules.transforms.pre(_stack_ros(ros), mask, _scale(game), cache=cache)
    lat, fc = out if cache else (out, None)
    lat = lat.reshape(len(ros), n, -1)
    if modules.transforms.pre_kind == "explicit_psro":
        A = game.num_actions
        for k, ro in enumerate(ros):
            if getattr(ro, "initial", False):
                lat[k, :, :A] = ro.own[:, None] * ro.sampling
    return (lat, fc) if cache else lat


def _scale(game):
    return float(max(game.utility_range.max(), 1e-12))


def _lao_forward(lao, P, labels):
    if P.shape[0] > lao.k_max:
        raise ContractError(f"{P.shape[0]} responses exceed the oracle's maximum of {lao.k_max}")
    feats = lao_features(P, labels, lao.unroll)
    z, cache = lao.net.forward_cache(feats)
    z = z[:, 0] - z[:, 0].max()
    e = np.exp(z)
    return e / e.sum(), cache


def lao_weights(cfg, modules, meta, cache=False):
    """Per-player LAO weights over the population, optionally with network caches."""
    if cfg.lao != "learned":
        w = explicit_ao(cfg.lao, meta)
        return (w, None) if cache else w
    A = meta.payoff_matrix
    if A.shape[0] == 1:
        w = AoWeights(np.ones(1), np.ones(1))
        return (w, None) if cache else w
    x, cx = _lao_forward(modules.lao, A, meta.row_iterations)
    y, cy = _lao_forward(modules.lao, -A.T, meta.col_iterations)
    return (AoWeights(x, y), (cx, cy)) if cache else AoWeights(x, y)


def aggregate_players(game, latents, weights):
    """Sum of latents with player-0 infosets weighted by row weights, player-1 by column weights."""
    W = np.where(game.infoset_player[None, :] == 0, weights.row[:, None], weights.col[:, None])
    return np.einsum("kn,knd->nd", W, latents)


def population_latents(game, modules, state):
    """Latents of the whole population; cached unless the pre-transform is learned."""
    if modules.transforms.learned_pre is not None:
        return compute_latents(game, modules, state.ros)
    missing = state.ros[len(state.latent_cache) :]
    if missing:
        state.latent_cache.extend(compute_latents(game, modules, missing))
    return np.stack(state.latent_cache)


def sigma_mixture(game, state, weights):
    """Realization-weighted mixture of the averaged policies; ``weights`` is ``(2, k)``."""
    reach = np.stack(state.sigma_reach)
    probs = np.stack([s.probs for s in state.averaged])
    w = np.asarray(weights)[game.infoset_player].T * reach
    num = np.einsum("kn,kna->na", w, probs)
    den = w.sum(axis=0)
    ok = den > 0.0
    uniform = game.legal_mask / game.legal_mask.sum(axis=1, keepdims=True)
    out = np.where(ok[:, None], num / np.where(ok, den, 1.0)[:, None], uniform)
    return PolicyTable(game, out, validate=False)


def averaged_policy(game, cfg, modules, state):
    latents = population_latents(game, modules, state)
    agg = aggregate_players(game, latents, lao_weights(cfg, modules, state.meta))
    return PolicyTable(game, modules.transforms.post(agg, game.legal_mask), validate=False)


def gao_policy(game, cfg, modules, state):
    """Evaluation policy: realization-weighted mixture of the averaged-policy history."""
    k = len(state.averaged)
    labels = np.arange(1.0, k + 1)
    if cfg.gao == "learned":
        S = state.sigma_meta.payoff_matrix
        w = AoWeights(modules.gao.weights(S, labels), modules.gao.weights(-S.T, labels))
    elif cfg.gao == "nash":
        w = explicit_ao("nash", state.sigma_meta)
    else:
        w = AoWeights(label_weights(cfg.gao, labels), label_weights(cfg.gao, labels))
    return sigma_mixture(game, state, np.stack([w.row, w.col]))


# Meta-optimisation ---------------------------------------------------------


class TabularSurrogate:
    """Policy table standing in for the whole module stack; it can represent any target exactly."""

    def __init__(self, game, policy):
        self.game = game
        self.probs = np.array(policy.probs if isinstance(policy, PolicyTable) else policy, dtype=float)

    def policy(self):
        return PolicyTable(self.game, self.probs, validate=False)

    def fit_step(self, targets, weights, lr):
        """Gradient step on the per-infoset squared error (a convex move toward the target)."""
        diff = self.probs - targets
        loss = float((weights * (diff**2).sum(axis=1)).sum())
        self.probs = self.probs - min(lr, 1.0) * diff
        return loss


def meta_targets(game, sigma, eta, reach_weighted=True):
    """Targets ``eta * sigma_i + (1 - eta) * BR_i`` and per-infoset loss weights.

    The mixture is taken between strategies (realization-weighted), so its
    value against ``sigma_-i`` is exactly the convex combination of the two
    values.  Weights sum to one per player: the target's reach, or uniform.
    """
    probs = np.array(sigma.probs, dtype=float)
    targets = np.zeros_like(probs)
    weights = np.zeros(game.num_infosets)
    for p, rows in enumerate(_player_rows(game)):
        br, _ = best_response(game, sigma, p)
        mix = mixture_policy(game, [sigma, br], np.array([eta, 1.0 - eta]))
        targets[rows] = mix.probs[rows]
        if reach_weighted:
            joint = probs.copy()
            joint[rows] = mix.probs[rows]
            own, ext = infoset_reach(game, joint, p)
            w = own * ext
        else:
            w = rows.astype(float)
        weights += w / max(w.sum(), 1e-300)
    return targets, weights


def pipeline_gradients(game, cfg, modules, state, targets, weights):
    """Weighted target loss of post(aggregate(pre)) and the gradients of every learned module.

    Returns ``(loss, grads)`` with ``grads`` keyed by ``"post"``, ``"pre"`` and
    ``"lao"`` for the modules that are learned.  The learned post-transform
    holds its scale normaliser fixed, as in its own backward pass.
    """
    tp = modules.transforms
    mask = game.legal_mask
    learned_pre = tp.learned_pre is not None
    if learned_pre:
        latents, pre_cache = compute_latents(game, modules, state.ros, cache=True)
    else:
        latents = population_latents(game, modules, state)
    w, lao_cache = lao_weights(cfg, modules, state.meta, cache=True)
    agg = aggregate_players(game, latents, w)
    probs, post_cache = tp.post(agg, mask, cache=True)
    diff = probs - targets
    loss = float((weights * (diff**2).sum(axis=1)).sum())
    g_probs = 2.0 * weights[:, None] * diff
    grads = {}
    if tp.learned_post is not None:
        grads["post"], g_agg = tp.learned_post.backward(post_cache, g_probs)
    else:
        g_agg = np.zeros_like(agg)
        A = game.num_actions
        g_agg[:, :A] = positive_part_backward(agg[:, :A], mask, g_probs)
    if learned_pre:
        W = np.where(game.infoset_player[None, :] == 0, w.row[:, None], w.col[:, None])
        g_lat = (W[:, :, None] * g_agg[None]).reshape(-1, agg.shape[1])
        grads["pre"] = tp.learned_pre.backward(pre_cache, g_lat)
    if modules.lao is not None and lao_cache is not None:
        dots = np.einsum("knd,nd->kn", latents, g_agg)
        total = None
        for p, (weights_p, cache_p) in enumerate(zip((w.row, w.col), lao_cache)):
            g_w = dots[:, game.infoset_player == p].sum(axis=1)
            gp, _ = modules.lao.net.backward(cache_p, softmax_backward(weights_p, g_w)[:, None])
            total = gp if total is None else [a + b for a, b in zip(total, gp)]
        grads["lao"] = total
    return loss, grads


def _pipeline_step(game, cfg, modules, state, targets, weights, lr):
    """One Adam step of every learned module on the weighted target loss."""
    loss, grads = pipeline_gradients(game, cfg, modules, state, targets, weights)
    tp = modules.transforms
    owners = {"post": tp.learned_post, "pre": tp.learned_pre, "lao": modules.lao}
    for name, g in grads.items():
        params = owners[name].params
        adam_step(_Params(params), g, modules.optimiser(name, params, lr))
    return loss


def gao_gradients(game, cfg, modules, state, targets, weights):
    """Loss and parameter gradients of a learned GAO through the realization-weighted mixture.

    With mixture ``p = sum_k w_k r_k s_k / sum_k w_k r_k`` over the averaged
    policies ``s_k`` with own reach ``r_k``, ``dp/dw_k = r_k (s_k - p) / den``.
    """
    k = len(state.averaged)
    if k < 2:
        return None, None
    S = state.sigma_meta.payoff_matrix
    labels = np.arange(1.0, k + 1)
    reach = np.stack(state.sigma_reach)
    probs = np.stack([s.probs for s in state.averaged])
    uniform = game.legal_mask / game.legal_mask.sum(axis=1, keepdims=True)
    grads = None
    loss = 0.0
    for p, P in enumerate((S, -S.T)):
        wk, cache = _lao_forward(modules.gao, P, labels)
        rows = game.infoset_player == p
        num = np.einsum("k,kn,kna->na", wk, reach, probs)
        den = np.einsum("k,kn->n", wk, reach)
        ok = den > 0.0
        safe = np.where(ok, den, 1.0)
        mix = np.where(ok[:, None], num / safe[:, None], uniform)
        diff = np.where(rows[:, None], mix - targets, 0.0)
        loss += float((weights * (diff**2).sum(axis=1)).sum())
        g_mix = 2.0 * weights[:, None] * diff * ok[:, None]
        g_w = np.einsum("kn,kna,na->k", reach / safe, probs - mix[None], g_mix)
        gp, _ = modules.gao.net.backward(cache, softmax_backward(wk, g_w)[:, None])
        grads = gp if grads is None else [a + b for a, b in zip(grads, gp)]
    return loss, grads


def _gao_step(game, cfg, modules, state, targets, weights, lr):
    loss, grads = gao_gradients(game, cfg, modules, state, targets, weights)
    if grads is not None:
        adam_step(modules.gao.net, grads, modules.optimiser("gao", modules.gao.params, lr))
    return loss


def meta_optimize(game, sigma, modules, cfg, state=None):
    """Fit the modules toward ``eta * sigma + (1 - eta) * best response`` for ``meta_steps`` steps.

    ``modules`` is either a :class:`TabularSurrogate` or the run's
    :class:`UdefModules` (which needs ``state``).  Returns the loss trace.
    """
    targets, weights = meta_targets(game, sigma, cfg.eta, cfg.reach_weighted)
    trace = []
    for _ in range(int(cfg.meta_steps)):
        if isinstance(modules, TabularSurrogate):
            trace.append(modules.fit_step(targets, weights, cfg.meta_lr))
            continue
        if state is None:
            raise ContractError("pipeline meta-optimisation needs the run state")
        if not modules.trainable:
            trace.append(_pipeline_loss(game, cfg, modules, state, targets, weights))
            continue
        trace.append(_pipeline_step(game, cfg, modules, state, targets, weights, cfg.meta_lr))
        if modules.gao is not None:
            _gao_step(game, cfg, modules, state, targets, weights, cfg.meta_lr)
    return trace


def _pipeline_loss(game, cfg, modules, state, targets, weights):
    probs = averaged_policy(game, cfg, modules, state).probs
    return float((weights * ((probs - targets) ** 2).sum(axis=1)).sum())


# Main loop -----------------------------------------------------------------


PAYOFF_ORACLES = ("nash", "learned")


def grow_meta_game(game, cfg, meta, policy, iteration, evaluate):
    """Append ``policy`` for both players; payoffs are estimated only when ``evaluate``.

    Uniform, linear and last weights read only the iteration labels, so
    without a payoff-reading oracle the new entries are left as NaN.
    """
    if evaluate:
        return augment_meta_game(game, meta, ([policy], [policy]), seed=cfg.seed, iteration=iteration)
    r, c = meta.shape
    M = np.full((r + 1, c + 1), np.nan)
    M[:r, :c] = meta.payoff_matrix
    return MetaGame(
        payoff_matrix=M,
        row_responses=list(meta.row_responses) + [policy],
        col_responses=list(meta.col_responses) + [policy],
        estimation=meta.estimation,
        episodes=meta.episodes,
        row_iterations=list(meta.row_iterations) + [iteration],
        col_iterations=list(meta.col_iterations) + [iteration],
    )


def _initial_ro(game, policy):
    """Response-oracle output of the initial policy: zero values, exact reach."""
    probs = np.array(policy.probs, dtype=float)
    n, A = game.num_infosets, game.num_actions
    own, ext = np.zeros(n), np.zeros(n)
    for p in (0, 1):
        o, e = infoset_reach(game, probs, p)
        own += o
        ext += e
    out = RoOutput(np.zeros((n, A)), own, ext, np.zeros(n), probs, np.zeros(n, np.int64))
    out.initial = True
    return out


def _ro_hyper(cfg):
    return RoHyper(
        q_hidden=cfg.ro_hidden,
        policy_hidden=cfg.ro_hidden,
        lr=cfg.ro_lr,
        episodes=cfg.episodes_ro,
        rounds=cfg.ro_rounds,
        q_steps=cfg.ro_q_steps,
        rp_steps=cfg.ro_rp_steps,
        capacity=cfg.ro_capacity,
        eps_start=cfg.ro_eps_start,
        eps_end=cfg.ro_eps_end,
    )


def _respond(game, cfg, sigma, rng, nets, buffers=None):
    hs = cfg.effective_hs
    outs = []
    for p in (0, 1):
        if cfg.ro_mode == "tabular":
            outs.append(tabular_ro(game, p, sigma, hs=hs, historical=sigma))
            continue
        kept = buffers[p] if buffers is not None and cfg.ro_keep_buffer else None
        out, stats = neural_ro(game, p, nets[p], sigma, hs, _ro_hyper(cfg), rng, historical=sigma, buffer=kept)
        if buffers is not None:
            buffers[p] = stats["buffer"]
        outs.append(out)
    return RoOutput.merge(game, outs)


def run_udef(game, cfg, transforms=None, lao=None, gao=None, initial_policy=None, callback=None):
    """Run the loop for up to ``cfg.max_iterations`` iterations.

    Returns ``(log, modules, state)``.  ``callback(iteration, log)`` is
    called after each logged iteration.
    """
    cfg = cfg.validate()
    if cfg.pre == "learned" and cfg.las_dim < 2 * game.num_actions:
        raise ConfigurationError(f"las_dim {cfg.las_dim} < 2 x {game.num_actions} actions")
    modules = UdefModules.build(game, cfg, transforms, lao, gao)
    rng = np.random.default_rng(cfg.seed)
    nets = None
    buffers = [None, None]
    if cfg.ro_mode == "neural":
        nets = [RoNetworks.create(game, _ro_hyper(cfg), seed=int(rng.integers(2**32))) for _ in (0, 1)]
    init = PolicyTable.uniform(game) if initial_policy is None else initial_policy
    ro0 = _initial_ro(game, init)
    empty = MetaGame(estimation=cfg.meta_estimation, episodes=cfg.episodes_meta)
    meta = grow_meta_game(game, cfg, empty, init, 0, cfg.lao in PAYOFF_ORACLES)
    state = UdefState(ros=[ro0], tables=[init], meta=meta)
    log = RunLog(config=cfg.to_dict(), seed=cfg.seed, utility_range=_scale(game))
    for t in range(1, int(cfg.max_iterations) + 1):
        start = time.perf_counter()
        sigma = averaged_policy(game, cfg, modules, state)
        state.add_averaged(game, sigma)
        if cfg.gao in PAYOFF_ORACLES:
            state.sigma_meta = grow_meta_game(game, cfg, state.sigma_meta or empty, sigma, t, True)
        ro = _respond(game, cfg, sigma, rng, nets, buffers)
        state.ros.append(ro)
        latent = compute_latents(game, modules, [ro])[0]
        table = PolicyTable(game, modules.transforms.post(latent, game.legal_mask), validate=False)
        state.tables.append(table)
        state.meta = grow_meta_game(game, cfg, state.meta, table, t, cfg.lao in PAYOFF_ORACLES)
        meta_loss = None
        if cfg.meta_steps > 0 and t >= cfg.meta_train and state.meta_updates < cfg.meta_train_max:
            trace = meta_optimize(game, averaged_policy(game, cfg, modules, state), modules, cfg, state)
            state.meta_updates += 1
            log.meta_losses.append(trace)
            meta_loss = trace[-1] if trace else None
        evaluation = gao_policy(game, cfg, modules, state)
        log.policies.append(evaluation)
        log.averaged.append(sigma)
        log.append(t, nash_conv(game, evaluation), meta_loss, 1000.0 * (time.perf_counter() - start))
        if callback is not None:
            callback(t, log)
        if termination_oracle(log, cfg):
            break
    return log, modules, state


class UDEFSolver(BaseEstimator):
    """Estimator wrapper around :func:`run_udef`.

    Parameters
    ----------
    preset : str or None
        Name of a preset; ``config`` overrides are applied on top.
    config : dict or UdefConfig or None
    max_iterations, seed : int or None
        Shortcuts overriding the config.
    transforms, lao, gao : optional pretrained modules.
    """

    def __init__(self, preset=None, config=None, max_iterations=None, seed=None, transforms=None, lao=None, gao=None):
        self.preset = preset
        self.config = config
        self.max_iterations = max_iterations
        self.seed = seed
        self.transforms = transforms
        self.lao = lao
        self.gao = gao

    def resolved_config(self):
        cfg = self.config
        if isinstance(cfg, UdefConfig):
            values = cfg.to_dict()
        else:
            values = dict(cfg or {})
        if self.max_iterations is not None:
            values["max_iterations"] = self.max_iterations
        if self.seed is not None:
            values["seed"] = self.seed
        if self.preset is not None:
            return preset(self.preset, **values)
        return UdefConfig.from_dict(values)

    def fit(self, game, y=None):
        cfg = self.resolved_config()
        self.log_, self.modules_, self.state_ = run_udef(game, cfg, self.transforms, self.lao, self.gao)
        self.config_ = cfg
        self.game_ = game
        return self

    @property
    def average_policy_(self):
        check_is_fitted(self, "log_")
        return self.log_.policies[-1]

    def nash_conv(self):
        check_is_fitted(self, "log_")
        return nash_conv(self.game_, self.average_policy_).total
