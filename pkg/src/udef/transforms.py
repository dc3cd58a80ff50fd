"""Pre-transforms (RO outputs to latent vectors) and post-transforms (latents to policies).

Latent vectors have ``las_dim`` slots per infoset.  Explicit transforms use
slots ``[0, A)``.  The learned pre-transform splits its output into a
regret-like PReLU block ``[0, A)``, a probability-like softmax block
``[A, 2A)`` and free slots ``[2A, d)``; a block selector zeroes the block
the current configuration does not use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ConfigurationError, ContractError
from .games.evaluation import greedy_actions
from .games.policy import normalize_rows
from .nn import AdamState, Mlp, adam_step, load_networks, loss_grad, masked_softmax, save_networks
from .tabular import regret_matching

PRE_KINDS = ("explicit_psro", "explicit_cfr", "learned")
POST_KINDS = ("explicit_identity_renorm", "explicit_regret_matching", "learned")
BLOCKS = ("cfr", "psro")
LOG_FLOOR = 1e-4
# pretraining learning rate decays linearly to this fraction of its start value
LR_FLOOR = 0.1


@dataclass
class LatentVector:
    """One infoset's point in the latent additive space."""

    values: np.ndarray
    legal_mask: np.ndarray


def psro_latent(q, own, mask, temperature=1.0, scale=1.0):
    """``own * softmax(q / temperature)`` on legal actions; temperature 0 is argmax."""
    if temperature == 0:
        pick = greedy_actions(q, mask, scale)
        probs = np.eye(q.shape[1])[pick]
    else:
        probs = masked_softmax(q / temperature, mask)
    return own[:, None] * probs


def cfr_latent(q, bv, ext, mask):
    """Counterfactual regret ``ext * (q - bv)`` on legal actions."""
    return np.where(mask, ext[:, None] * (q - bv[:, None]), 0.0)


def pre_features(q, own, ext, bv, mask, scale):
    """Input of the learned pre-transform, in units of the utility range."""
    qn = np.where(mask, q / scale, 0.0)
    bn = bv / scale
    return np.column_stack([qn, own, ext, bn, ext[:, None] * qn, ext * bn, own[:, None] * qn, mask.astype(float)])


def post_features(latent, mask):
    """Scale-free view of a latent: logs of the max-abs normalised values, clamped below.

    Renormalisation and regret matching are both ``softmax(log max(x, 0))``,
    so this input makes the explicit post-transforms linear in the features.
    """
    m = np.abs(latent).max(axis=1, keepdims=True)
    x = latent / np.where(m > 0.0, m, 1.0)
    return np.column_stack([np.log(np.maximum(x, LOG_FLOOR)), mask.astype(float)]), m


class LearnedPre:
    """MLP pre-transform with a PReLU block and an own-reach-weighted softmax block."""

    def __init__(self, num_actions, las_dim=16, hidden=64, active="cfr", seed=0):
        if las_dim < 2 * num_actions:
            raise ConfigurationError(f"las_dim {las_dim} < 2 x {num_actions} actions")
        if active not in BLOCKS:
            raise ConfigurationError(f"unknown active block {active!r}")
        self.num_actions = num_actions
        self.las_dim = las_dim
        self.active = active
        A = num_actions
        self.net = Mlp([4 * A + 4, hidden, las_dim], seed=seed)
        self.slopes = np.ones(A)

    @property
    def params(self):
        return self.net.params + [self.slopes]

    def copy(self):
        out = LearnedPre.__new__(LearnedPre)
        out.__dict__.update(self.__dict__)
        out.net = self.net.copy()
        out.slopes = self.slopes.copy()
        return out

    def forward(self, q, own, ext, bv, mask, scale, active=None):
        active = self.active if active is None else active
        A = self.num_actions
        x = pre_features(q, own, ext, bv, mask, scale)
        z, cache = self.net.forward_cache(x)
        z = np.atleast_2d(z)
        out = np.zeros_like(z)
        regret = np.where(z[:, :A] >= 0.0, z[:, :A], self.slopes * z[:, :A])
        probs = masked_softmax(z[:, A : 2 * A], mask)
        if active in ("cfr", "both"):
            out[:, :A] = np.where(mask, regret, 0.0)
        if active in ("psro", "both"):
            out[:, A : 2 * A] = own[:, None] * probs
        out[:, 2 * A :] = z[:, 2 * A :]
        return out, (cache, z, probs, own, mask, active)

    def backward(self, fcache, grad, grad_probs=None):
        """Parameter gradients; ``grad_probs`` is an extra gradient on the softmax branch before the reach factor."""
        cache, z, probs, own, mask, active = fcache
        A = self.num_actions
        gz = np.zeros_like(z)
        g_slopes = np.zeros(A)
        if active in ("cfr", "both"):
            g = np.where(mask, grad[:, :A], 0.0)
            neg = z[:, :A] < 0.0
            gz[:, :A] = np.where(neg, self.slopes * g, g)
            g_slopes = (g * np.where(neg, z[:, :A], 0.0)).sum(axis=0)
        if active in ("psro", "both"):
            gp = own[:, None] * grad[:, A : 2 * A]
            if grad_probs is not None:
                gp = gp + grad_probs
            gz[:, A : 2 * A] = probs * (gp - (gp * probs).sum(axis=1, keepdims=True))
        gz[:, 2 * A :] = grad[:, 2 * A :]
        grads, _ = self.net.backward(cache, gz)
        return grads + [g_slopes]


class LearnedPost:
    """MLP post-transform with a masked softmax output."""

    def __init__(self, num_actions, las_dim=16, hidden=64, seed=0):
        self.num_actions = num_actions
        self.las_dim = las_dim
        self.net = Mlp([las_dim + num_actions, hidden, num_actions], output="softmax", seed=seed)

    @property
    def params(self):
        return self.net.params

    def copy(self):
        out = LearnedPost.__new__(LearnedPost)
        out.__dict__.update(self.__dict__)
        out.net = self.net.copy()
        return out

    def forward(self, latent, mask):
        x, m = post_features(latent, mask)
        p, cache = self.net.forward_cache(x, mask)
        return np.atleast_2d(p), (cache, latent, m)

    def backward(self, fcache, grad):
        """Parameter gradients and the gradient w.r.t. the latent (normaliser held fixed)."""
        cache, latent, m = fcache
        grads, gx = self.net.backward(cache, grad)
        d = self.las_dim
        m = np.where(m > 0.0, m, 1.0)
        x = latent / m
        g_log = np.where(x > LOG_FLOOR, gx[:, :d] / np.where(x > LOG_FLOOR, x, 1.0), 0.0)
        return grads, g_log / m


class TransformPair:
    """A pre-transform and a post-transform sharing one latent layout.

    Parameters
    ----------
    pre : {"explicit_psro", "explicit_cfr", "learned"}
    post : {"explicit_identity_renorm", "explicit_regret_matching", "learned"}
    num_actions, las_dim : int
    temperature : float
        Softmax temperature of the explicit PSRO pre-transform (0 = argmax).
    active : {"cfr", "psro"}
        Block of the learned pre-transform that feeds the post-transform.
    """

    def __init__(
        self,
        pre="explicit_cfr",
        post="explicit_regret_matching",
        num_actions=3,
        las_dim=16,
        temperature=1.0,
        active="cfr",
        hidden=64,
        seed=0,
    ):
        if pre not in PRE_KINDS:
            raise ConfigurationError(f"unknown pre-transform {pre!r}")
        if post not in POST_KINDS:
            raise ConfigurationError(f"unknown post-transform {post!r}")
        if las_dim < num_actions:
            raise ConfigurationError(f"las_dim {las_dim} < {num_actions} actions")
        self.pre_kind = pre
        self.post_kind = post
        self.num_actions = num_actions
        self.las_dim = las_dim
        self.temperature = float(temperature)
        self.active = active
        rng = np.random.default_rng(seed)
        self.learned_pre = LearnedPre(num_actions, las_dim, hidden, active, rng) if pre == "learned" else None
        self.learned_post = LearnedPost(num_actions, las_dim, hidden, rng) if post == "learned" else None
        self.pretrained = False

    @property
    def is_learned(self):
        return self.learned_pre is not None or self.learned_post is not None

    @property
    def branch_split(self):
        A = self.num_actions
        return {"regret": [0, A], "probability": [A, 2 * A], "free": [2 * A, self.las_dim]}

    def copy(self):
        out = TransformPair.__new__(TransformPair)
        out.__dict__.update(self.__dict__)
        out.learned_pre = None if self.learned_pre is None else self.learned_pre.copy()
        out.learned_post = None if self.learned_post is None else self.learned_post.copy()
        return out

    def params(self):
        out = []
        if self.learned_pre is not None:
            out += self.learned_pre.params
        if self.learned_post is not None:
            out += self.learned_post.params
        return out

    def pre(self, ro, mask, scale=1.0, cache=False):
        """Latent ``(n, las_dim)`` for every infoset of an :class:`RoOutput`."""
        n, A = ro.q.shape
        out = np.zeros((n, self.las_dim))
        fc = None
        if self.pre_kind == "explicit_psro":
            out[:, :A] = psro_latent(ro.q, ro.own, mask, self.temperature, scale)
        elif self.pre_kind == "explicit_cfr":
            out[:, :A] = cfr_latent(ro.q, ro.bv, ro.external, mask)
        else:
            out, fc = self.learned_pre.forward(ro.q, ro.own, ro.external, ro.bv, mask, scale)
        if not np.all(np.isfinite(out)):
            raise ContractError("pre-transform produced non-finite latents")
        return (out, fc) if cache else out

    def post(self, latent, mask, cache=False):
        """Action distribution for each latent row."""
        latent = np.atleast_2d(np.asarray(latent, dtype=float))
        mask = np.atleast_2d(mask)
        if not np.all(np.isfinite(latent)):
            raise ContractError("latent contains non-finite entries")
        A = self.num_actions
        fc = None
        if self.post_kind == "explicit_identity_renorm":
            probs = normalize_rows(latent[:, :A], mask)
        elif self.post_kind == "explicit_regret_matching":
            probs = regret_matching(latent[:, :A], mask)
        else:
            probs, fc = self.learned_post.forward(latent, mask)
        return (probs, fc) if cache else probs

    def save(self, path):
        nets = {}
        if self.learned_pre is not None:
            nets["pre"] = self.learned_pre.net
            slopes = Mlp([1, self.num_actions])
            slopes.params = [self.learned_pre.slopes.reshape(1, -1), np.zeros(self.num_actions)]
            nets["pre_slopes"] = slopes
        if self.learned_post is not None:
            nets["post"] = self.learned_post.net
        meta = {
            "pre": self.pre_kind,
            "post": self.post_kind,
            "num_actions": self.num_actions,
            "las_dim": self.las_dim,
            "temperature": self.temperature,
            "active": self.active,
            "branch_split": self.branch_split,
            "pretrained": self.pretrained,
        }
        save_networks(path, nets, meta)

    @classmethod
    def load(cls, path):
        nets, meta = load_networks(path)
        tp = cls(
            meta["pre"], meta["post"], meta["num_actions"], meta["las_dim"], meta["temperature"], meta["active"]
        )
        if tp.learned_pre is not None:
            tp.learned_pre.net = nets["pre"]
            tp.learned_pre.slopes = nets["pre_slopes"].params[0].reshape(-1).copy()
        if tp.learned_post is not None:
            tp.learned_post.net = nets["post"]
        tp.pretrained = meta["pretrained"]
        return tp


def pre_transform(tp, ro, mask, scale=1.0):
    return tp.pre(ro, mask, scale)


def post_transform(tp, latent, mask):
    return tp.post(latent, mask)


# Pretraining ---------------------------------------------------------------


@dataclass
class PretrainBatch:
    q: np.ndarray
    own: np.ndarray
    ext: np.ndarray
    bv: np.ndarray
    zeta: np.ndarray
    mask: np.ndarray


def sample_inputs(rng, n, masks, scale):
    """Random RO outputs: uniform Q in half the utility range, uniform reach, Dirichlet sampling policy."""
    masks = np.asarray(masks, dtype=bool)
    mask = masks[rng.integers(0, len(masks), size=n)]
    A = mask.shape[1]
    q = np.where(mask, rng.uniform(-scale / 2, scale / 2, size=(n, A)), 0.0)
    own = rng.uniform(0.0, 1.0, size=n)
    ext = rng.uniform(0.0, 1.0, size=n)
    g = np.where(mask, rng.gamma(1.0, size=(n, A)), 0.0)
    zeta = g / g.sum(axis=1, keepdims=True)
    bv = (zeta * q).sum(axis=1)
    return PretrainBatch(q, own, ext, bv, zeta, mask)


def _combine(rng, latent, mask, n_out, kmax=8):
    """Gamma-weighted sums of 2..kmax random rows that share a legal mask.

    Normalised gamma weights are Dirichlet; the sums are left unnormalised
    because both explicit post-transforms are scale-free.
    """
    _, group = np.unique(mask, axis=0, return_inverse=True)
    group = group.reshape(-1)
    order = np.argsort(group, kind="stable")
    counts = np.bincount(group)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    idx0 = rng.integers(0, len(latent), size=n_out)
    g = group[idx0]
    k = rng.integers(2, kmax + 1, size=n_out)
    out = np.zeros((n_out, latent.shape[1]))
    for j in range(kmax):
        if j == 0:
            idx = idx0
        else:
            idx = order[starts[g] + (rng.random(n_out) * counts[g]).astype(np.int64)]
        w = rng.gamma(1.0, size=n_out) * (j < k)
        out += w[:, None] * latent[idx]
    return out, idx0


def _explicit_targets(batch, A, d, temperature):
    lat_cfr = np.zeros((len(batch.q), d))
    lat_cfr[:, :A] = cfr_latent(batch.q, batch.bv, batch.ext, batch.mask)
    lat_psro = np.zeros((len(batch.q), d))
    lat_psro[:, A : 2 * A] = psro_latent(batch.q, batch.own, batch.mask, temperature)
    return lat_cfr, lat_psro


def pretrain_transforms(
    tp, target, masks, scale, steps=1000, batch_size=1000, lr=5e-3, seed=0, temperature=None, heldout=2000
):
    """Fit the learned modules of ``tp`` to the explicit CFR and/or PSRO transforms.

    The pre-transform's regret block is trained toward ``ext * (q - bv) / scale``,
    its probability block toward ``own * softmax(q / temperature)`` and free
    slots toward zero.  The post-transform learns regret matching on regret
    blocks and renormalisation on probability blocks, using both single
    latents and random positive combinations of them.  Returns a held-out
    report.
    """
    if target not in ("cfr", "psro", "both"):
        raise ConfigurationError(f"unknown pretraining target {target!r}")
    A, d = tp.num_actions, tp.las_dim
    need = 2 * A if target == "both" or tp.learned_pre is not None else A
    if d < need:
        raise ConfigurationError(f"las_dim {d} too small for target {target!r} with {A} actions (need {need})")
    if not tp.is_learned:
        raise ConfigurationError("transform pair has no learned module to pretrain")
    T = tp.temperature if temperature is None else float(temperature)
    rng = np.random.default_rng(seed)
    pre, post = tp.learned_pre, tp.learned_post
    opt_pre = AdamState.for_net(_ParamView(pre.params), lr=lr) if pre is not None else None
    opt_post = AdamState.for_net(_ParamView(post.params), lr=lr) if post is not None else None
    blocks = ["cfr", "psro"] if target == "both" else [target]
    trace = []
    for step in range(int(steps)):
        frac = 1.0 - step / max(int(steps), 1)
        for opt in (opt_pre, opt_post):
            if opt is not None:
                opt.lr = lr * (LR_FLOOR + (1.0 - LR_FLOOR) * frac)
        batch = sample_inputs(rng, batch_size, masks, scale)
        lat_cfr, lat_psro = _explicit_targets(batch, A, d, T)
        lat_cfr[:, :A] /= scale
        step_loss = {}
        if pre is not None:
            goal = np.zeros((batch_size, d))
            if "cfr" in blocks:
                goal[:, :A] = lat_cfr[:, :A]
            if "psro" in blocks:
                goal[:, A : 2 * A] = lat_psro[:, A : 2 * A]
            active = "both" if target == "both" else target
            out, fc = pre.forward(batch.q, batch.own, batch.ext, batch.bv, batch.mask, scale, active)
            keep = np.ones(d, dtype=bool)
            if "cfr" not in blocks:
                keep[:A] = False
            if "psro" not in blocks:
                keep[A : 2 * A] = False
            loss, g = loss_grad(out[:, keep], goal[:, keep], "mse")
            full = np.zeros_like(out)
            full[:, keep] = g
            g_probs = None
            if "psro" in blocks:
                # the reach factor shrinks the signal on rarely reached states, so the
                # branch distribution is also fitted directly
                own = np.where(batch.own > 0.0, batch.own, 1.0)[:, None]
                _, g_probs = loss_grad(fc[2], lat_psro[:, A : 2 * A] / own, "mse")
            adam_step(_ParamView(pre.params), pre.backward(fc, full, g_probs), opt_pre)
            step_loss["pre_mse"] = loss
        if post is not None:
            xs, ys, ms = [], [], []
            for b in blocks:
                if pre is not None:
                    lat, _ = pre.forward(batch.q, batch.own, batch.ext, batch.bv, batch.mask, scale, b)
                else:
                    lat = lat_cfr if b == "cfr" else lat_psro
                for x_src in (lat, None):
                    if x_src is None:
                        x_src, rows = _combine(rng, lat, batch.mask, batch_size // 2)
                        m = batch.mask[rows]
                    else:
                        m = batch.mask
                    blk = x_src[:, :A] if b == "cfr" else x_src[:, A : 2 * A]
                    y = regret_matching(blk, m) if b == "cfr" else normalize_rows(blk, m)
                    xs.append(x_src)
                    ys.append(y)
                    ms.append(m)
            x, y, m = np.vstack(xs), np.vstack(ys), np.vstack(ms)
            probs, fc = post.forward(x, m)
            loss, g = loss_grad(probs, y, "distribution-mse")
            grads, _ = post.backward(fc, g)
            adam_step(_ParamView(post.params), grads, opt_post)
            step_loss["post_dmse"] = loss
        trace.append(step_loss)
    tp.pretrained = True
    report = heldout_report(tp, target, masks, scale, n=heldout, seed=seed + 1, temperature=T)
    report["trace"] = trace
    return tp, report


class _ParamView:
    """Adapter so :func:`adam_step` can update an arbitrary parameter list in place."""

    def __init__(self, params):
        self.params = params


def heldout_report(tp, target, masks, scale, n=2000, seed=1, temperature=None):
    """Held-out errors of the learned modules against the explicit transforms."""
    T = tp.temperature if temperature is None else float(temperature)
    rng = np.random.default_rng(seed)
    A, d = tp.num_actions, tp.las_dim
    batch = sample_inputs(rng, n, masks, scale)
    lat_cfr, lat_psro = _explicit_targets(batch, A, d, T)
    report = {}
    blocks = ["cfr", "psro"] if target == "both" else [target]
    pre, post = tp.learned_pre, tp.learned_post
    for b in blocks:
        if pre is not None:
            out, _ = pre.forward(batch.q, batch.own, batch.ext, batch.bv, batch.mask, scale, b)
            if b == "cfr":
                report["pre_cfr_mse"] = float(np.mean((out[:, :A] - lat_cfr[:, :A] / scale) ** 2))
            else:
                report["pre_psro_mse"] = float(np.mean((out[:, A : 2 * A] - lat_psro[:, A : 2 * A]) ** 2))
        if post is not None:
            lat = lat_cfr if b == "cfr" else lat_psro
            blk = lat[:, :A] if b == "cfr" else lat[:, A : 2 * A]
            ref = regret_matching(blk, batch.mask) if b == "cfr" else normalize_rows(blk, batch.mask)
            report[f"post_{b}_l1"] = float(np.abs(post.forward(lat, batch.mask)[0] - ref).sum(axis=1).mean())
        if pre is not None and post is not None:
            lat, _ = pre.forward(batch.q, batch.own, batch.ext, batch.bv, batch.mask, scale, b)
            probs = post.forward(lat, batch.mask)[0]
            if b == "psro":
                ref = masked_softmax(batch.q / T, batch.mask) if T > 0 else None
            else:
                ref = regret_matching(cfr_latent(batch.q, batch.bv, batch.ext, batch.mask), batch.mask)
            if ref is not None:
                report[f"pipeline_{b}_l1"] = float(np.abs(probs - ref).sum(axis=1).mean())
    return report
