"""Small feed-forward networks with hand-written backprop and Adam.

Everything here operates on 2-D batches ``(n, features)``; 1-D inputs are
treated as a batch of one.  Parameters live in a flat list so optimisers,
soft updates and checkpoints can treat every network the same way.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigurationError, ContractError, NumericalError

MASK_PENALTY = -1e9
HIDDEN_ACTIVATIONS = ("relu", "prelu")
OUTPUT_ACTIVATIONS = ("identity", "softmax")
LOSSES = ("mse", "distribution-mse")

_MAGIC = b"UDEFNN01"


def prelu(y, slope):
    """``y`` where ``y >= 0``, ``slope * y`` otherwise."""
    y = np.asarray(y, dtype=float)
    return np.where(y >= 0.0, y, slope * y)


def masked_softmax(logits, mask=None):
    """Softmax along the last axis with illegal entries forced to zero."""
    z = np.asarray(logits, dtype=float)
    if mask is not None:
        z = np.where(mask, z, MASK_PENALTY)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad):
    """Gradient w.r.t. logits given softmax output ``p`` and upstream ``grad``."""
    return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected network.

    Parameters
    ----------
    layer_sizes : list of int
        ``[in, hidden..., out]``.
    hidden : {"relu", "prelu"}
        Hidden activation; PReLU slopes are learnable, one per unit.
    output : {"identity", "softmax"}
        Softmax output takes an optional legal-action mask.
    seed : int or Generator
    prelu_init : float
        Initial PReLU slope.
    """

    def __init__(self, layer_sizes, hidden="relu", output="identity", seed=0, prelu_init=0.25):
        if hidden not in HIDDEN_ACTIVATIONS:
            raise ConfigurationError(f"unknown hidden activation {hidden!r}")
        if output not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {output!r}")
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigurationError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = sizes
        self.hidden = hidden
        self.output = output
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params = []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            self.params += [glorot(rng, fi, fo), np.zeros(fo)]
        if hidden == "prelu":
            self.params += [np.full(s, float(prelu_init)) for s in sizes[1:-1]]

    @property
    def num_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def weights(self):
        return self.params[0 : 2 * self.num_layers : 2]

    @property
    def biases(self):
        return self.params[1 : 2 * self.num_layers : 2]

    @property
    def slopes(self):
        return self.params[2 * self.num_layers :]

    def copy(self):
        out = Mlp.__new__(Mlp)
        out.layer_sizes = list(self.layer_sizes)
        out.hidden = self.hidden
        out.output = self.output
        out.params = [p.copy() for p in self.params]
        return out

    def same_architecture(self, other):
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden == other.hidden
            and self.output == other.output
        )

    def checksum(self):
        return float(sum(np.sum(p * (k + 1)) for k, p in enumerate(self.params)))

    def _input(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.layer_sizes[0]:
            raise ContractError(f"input has {x.shape[1]} features, network expects {self.layer_sizes[0]}")
        return x, single

    def forward(self, x, mask=None):
        out, _ = self.forward_cache(x, mask)
        return out

    def forward_cache(self, x, mask=None):
        """Forward pass that also returns what :meth:`backward` needs."""
        x, single = self._input(x)
        acts, pre = [x], []
        h = x
        for k in range(self.num_layers):
            z = h @ self.weights[k] + self.biases[k]
            pre.append(z)
            if k < self.num_layers - 1:
                h = np.maximum(z, 0.0) if self.hidden == "relu" else prelu(z, self.slopes[k])
                acts.append(h)
            else:
                h = z
        if self.output == "softmax":
            if mask is not None:
                mask = np.atleast_2d(np.asarray(mask, dtype=bool))
            h = masked_softmax(h, mask)
        cache = (acts, pre, h)
        return (h[0] if single else h), cache

    def backward(self, cache, grad_out):
        """Parameter gradients and input gradient for upstream ``grad_out``."""
        acts, pre, out = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if self.output == "softmax":
            g = softmax_backward(out, g)
        grads = [None] * len(self.params)
        for k in range(self.num_layers - 1, -1, -1):
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                z = pre[k - 1]
                if self.hidden == "relu":
                    g = g * (z > 0.0)
                else:
                    slope = self.slopes[k - 1]
                    grads[2 * self.num_layers + k - 1] = (g * np.where(z >= 0.0, 0.0, z)).sum(axis=0)
                    g = g * np.where(z >= 0.0, 1.0, slope)
        return grads, g

    def loss_and_grads(self, x, target, loss="mse", mask=None, weights=None):
        """Mean loss over the batch and its gradients."""
        out, cache = self.forward_cache(x, mask)
        out = np.atleast_2d(out)
        value, g = loss_grad(out, np.atleast_2d(target), loss, weights)
        grads, _ = self.backward(cache, g)
        return value, grads


def loss_grad(out, target, loss="mse", weights=None):
    """Loss value and gradient w.r.t. ``out``.

    ``mse`` averages squared error over every element; ``distribution-mse``
    sums it over the last axis and averages over samples.  Optional
    per-sample ``weights`` are normalised to mean one.
    """
    if loss not in LOSSES:
        raise ConfigurationError(f"unknown loss {loss!r}")
    if out.shape != target.shape:
        raise ContractError(f"output shape {out.shape} does not match target {target.shape}")
    n = out.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    diff = out - target
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.mean() if w.sum() > 0 else np.zeros(n)
    per = (diff**2).sum(axis=1)
    scale = 1.0 if loss == "distribution-mse" else 1.0 / out.shape[1]
    value = float(scale * (w * per).mean())
    grad = 2.0 * scale * w[:, None] * diff / n
    return value, grad


@dataclass
class AdamState:
    """Moment estimates and step counter for one network."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net, lr=0.01, **kwargs):
        return cls(lr=lr, m=[np.zeros_like(p) for p in net.params], v=[np.zeros_like(p) for p in net.params], **kwargs)


def adam_step(net, grads, state):
    """In-place Adam update of ``net``; returns ``(net, state)``."""
    if len(grads) != len(net.params) or any(g.shape != p.shape for g, p in zip(grads, net.params)):
        raise ContractError("gradient shapes do not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, (p, g) in enumerate(zip(net.params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p -= state.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return net, state


def soft_update(target, online, tau):
    """``target <- tau * target + (1 - tau) * online`` (tau weights the old target)."""
    if not target.same_architecture(online):
        raise ContractError("soft update between different architectures")
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError("tau must lie in [0, 1]")
    for t, o in zip(target.params, online.params):
        t *= tau
        t += (1.0 - tau) * o
    return target


def train_steps(net, state, x, target, steps, batch_size, rng, loss="mse", mask=None, weights=None):
    """Minibatch Adam on a fixed dataset; returns per-step losses."""
    x = np.atleast_2d(x)
    target = np.atleast_2d(target)
    n = len(x)
    losses = np.zeros(int(steps))
    for s in range(int(steps)):
        idx = rng.integers(0, n, size=min(batch_size, n)) if batch_size < n else np.arange(n)
        m = None if mask is None else mask[idx]
        w = None if weights is None else weights[idx]
        losses[s], grads = net.loss_and_grads(x[idx], target[idx], loss, m, w)
        adam_step(net, grads, state)
    return losses


# Checkpoints ----------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
# header, then every parameter array as little-endian float64, row-major, in
# the order listed by the header.


def save_networks(path, nets, meta=None):
    """Write ``{name: Mlp}`` plus free-form JSON ``meta`` to one file."""
    header = {"version": 1, "meta": meta or {}, "networks": []}
    blobs = []
    for name, net in nets.items():
        header["networks"].append(
            {
                "name": name,
                "layer_sizes": net.layer_sizes,
                "hidden": net.hidden,
                "output": net.output,
                "shapes": [list(p.shape) for p in net.params],
            }
        )
        blobs += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params]
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_networks(path):
    """Inverse of :func:`save_networks`; returns ``(nets, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ContractError(f"{path} is not a network checkpoint")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode())
        nets = {}
        for spec in header["networks"]:
            net = Mlp.__new__(Mlp)
            net.layer_sizes = spec["layer_sizes"]
            net.hidden = spec["hidden"]
            net.output = spec["output"]
            net.params = []
            for shape in spec["shapes"]:
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float)
                net.params.append(data.reshape(shape))
            nets[spec["name"]] = net
    return nets, header["meta"]
