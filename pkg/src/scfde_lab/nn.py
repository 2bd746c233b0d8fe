"""Minimal dense-network engine: affine/ReLU stacks with batch normalization
and split softmax heads, analytic backpropagation, an adaptive-moment
optimizer, and the stage-weighted cross-entropy loss used to train unfolded
equalizers.

Parameters are float64 numpy arrays. ``forward`` is pure given the parameter
snapshot apart from batch-norm running statistics, which update only in train
mode; inference uses running statistics and is batch-size invariant.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

__all__ = [
    "Affine",
    "Relu",
    "BatchNorm",
    "SoftmaxSplit",
    "Network",
    "forward",
    "backward",
    "zero_grads",
    "accumulate_grads",
    "LossSpec",
    "weighted_ce_loss",
    "ce_clamp_count",
    "reset_ce_clamp_count",
    "AdamState",
    "adam_step",
    "save_network",
    "load_network",
    "network_equal",
]

CE_CLAMP_EPS = 1e-12
_ce_clamp_events = 0


class Affine:
    kind = "affine"
    param_names = ("w", "b")

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)  # (n_out, n_in)
        self.b = np.asarray(b, dtype=np.float64)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: Rng) -> "Affine":
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.generator.uniform(-limit, limit, size=(n_out, n_in))
        return cls(w, np.zeros(n_out))

    @property
    def n_in(self):
        return self.w.shape[1]

    @property
    def n_out(self):
        return self.w.shape[0]


class Relu:
    kind = "relu"
    param_names = ()


class BatchNorm:
    kind = "batchnorm"
    param_names = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.99, eps: float = 1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    @property
    def dim(self):
        return len(self.gamma)


class SoftmaxSplit:
    kind = "softmax_split"
    param_names = ()

    def __init__(self, sizes: tuple[int, ...]):
        self.sizes = tuple(int(s) for s in sizes)


@dataclass
class Network:
    layers: list = field(default_factory=list)

    def trainable(self):
        """Yield (layer_index, name, array) for parameters the optimizer owns."""
        for i, layer in enumerate(self.layers):
            if layer.kind == "affine":
                yield i, "w", layer.w
                yield i, "b", layer.b
            elif layer.kind == "batchnorm":
                yield i, "gamma", layer.gamma
                yield i, "beta", layer.beta

    def copy(self) -> "Network":
        out = []
        for layer in self.layers:
            if layer.kind == "affine":
                out.append(Affine(layer.w.copy(), layer.b.copy()))
            elif layer.kind == "relu":
                out.append(Relu())
            elif layer.kind == "batchnorm":
                bn = BatchNorm(layer.dim, layer.momentum, layer.eps)
                bn.gamma = layer.gamma.copy()
                bn.beta = layer.beta.copy()
                bn.running_mean = layer.running_mean.copy()
                bn.running_var = layer.running_var.copy()
                out.append(bn)
            elif layer.kind == "softmax_split":
                out.append(SoftmaxSplit(layer.sizes))
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return Network(out)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def forward(net: Network, x: np.ndarray, train: bool = False):
    """Run the stack on a batch (n, dim); returns (output, cache).

    The cache is consumed by :func:`backward` and is only populated in train
    mode order (infer-mode batch norm caches enough for a backward pass too,
    but running statistics are frozen there).
    """
    x = np.asarray(x, dtype=np.float64)
    cache = []
    for layer in net.layers:
        if layer.kind == "affine":
            if x.shape[1] != layer.n_in:
                raise ValueError(f"input dim {x.shape[1]} != affine n_in {layer.n_in}")
            cache.append(("affine", x))
            x = x @ layer.w.T + layer.b
        elif layer.kind == "relu":
            cache.append(("relu", x > 0))
            x = np.maximum(x, 0.0)
        elif layer.kind == "batchnorm":
            if train:
                mu = x.mean(axis=0)
                var = x.var(axis=0)
                layer.running_mean *= layer.momentum
                layer.running_mean += (1.0 - layer.momentum) * mu
                layer.running_var *= layer.momentum
                layer.running_var += (1.0 - layer.momentum) * var
            else:
                mu = layer.running_mean
                var = layer.running_var
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mu) * inv_std
            cache.append(("batchnorm", (xhat, inv_std, train)))
            x = layer.gamma * xhat + layer.beta
        elif layer.kind == "softmax_split":
            if x.shape[1] != sum(layer.sizes):
                raise ValueError("softmax head sizes do not match input dim")
            parts, offset = [], 0
            for s in layer.sizes:
                parts.append(_softmax(x[:, offset : offset + s]))
                offset += s
            x = np.concatenate(parts, axis=1)
            cache.append(("softmax_split", x))
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return x, cache


def backward(net: Network, cache, gy: np.ndarray):
    """Analytic gradients from an output gradient.

    Returns (grads, gx): ``grads`` is a list aligned with layers holding dicts
    of parameter gradients, ``gx`` the gradient at the network input.
    """
    g = np.asarray(gy, dtype=np.float64)
    grads: list[dict | None] = [None] * len(net.layers)
    if len(cache) != len(net.layers):
        raise ValueError("cache does not match network (was forward run?)")
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        kind, saved = cache[i]
        if kind != layer.kind:
            raise ValueError("cache does not match network layer kinds")
        if kind == "affine":
            x = saved
            grads[i] = {"w": g.T @ x, "b": g.sum(axis=0)}
            g = g @ layer.w
        elif kind == "relu":
            g = g * saved
        elif kind == "batchnorm":
            xhat, inv_std, was_train = saved
            grads[i] = {"gamma": (g * xhat).sum(axis=0), "beta": g.sum(axis=0)}
            gxhat = g * layer.gamma
            if was_train:
                g = inv_std * (
                    gxhat
                    - gxhat.mean(axis=0)
                    - xhat * (gxhat * xhat).mean(axis=0)
                )
            else:
                g = gxhat * inv_std
        elif kind == "softmax_split":
            p = saved
            out, offset = [], 0
            for s in layer.sizes:
                ps = p[:, offset : offset + s]
                gs = g[:, offset : offset + s]
                out.append(ps * (gs - (gs * ps).sum(axis=1, keepdims=True)))
                offset += s
            g = np.concatenate(out, axis=1)
    return grads, g


def zero_grads(net: Network):
    grads = []
    for layer in net.layers:
        if layer.kind == "affine":
            grads.append({"w": np.zeros_like(layer.w), "b": np.zeros_like(layer.b)})
        elif layer.kind == "batchnorm":
            grads.append({"gamma": np.zeros_like(layer.gamma),
                          "beta": np.zeros_like(layer.beta)})
        else:
            grads.append(None)
    return grads


def accumulate_grads(total, extra):
    for t, e in zip(total, extra):
        if t is None or e is None:
            continue
        for name, arr in e.items():
            t[name] += arr
    return total


@dataclass(frozen=True)
class LossSpec:
    """Stage weighting for the multi-stage cross-entropy loss.

    Stage q gets weight (q+1)^exponent normalized by sum_{q=1}^{Q-1} q^exponent;
    exponent 1 is the default, 4 shifts emphasis to late stages for the
    parameter-shared variants. A single-stage loss degenerates to weight 1.
    """

    n_stages: int
    exponent: int = 1

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.exponent < 1:
            raise ValueError("exponent must be >= 1")

    def weights(self) -> np.ndarray:
        q = np.arange(self.n_stages, dtype=np.float64)
        if self.n_stages == 1:
            return np.ones(1)
        denom = np.sum(np.arange(1, self.n_stages) ** float(self.exponent))
        return (q + 1.0) ** float(self.exponent) / denom


def ce_clamp_count() -> int:
    return _ce_clamp_events


def reset_ce_clamp_count():
    global _ce_clamp_events
    _ce_clamp_events = 0


def weighted_ce_loss(stage_ps, targets, spec: LossSpec):
    """Stage-weighted cross entropy over per-component PMFs.

    ``stage_ps`` is a list (one entry per stage) of arrays (B, K, 2, L) of
    predicted component PMFs; ``targets`` the one-hot labels (B, K, 2, L).
    Per instance the loss is (1/(Q K)) sum_q sum_k w_q (ce_re + ce_im) with
    ce = -(1/L) sum_l t_l ln p_l, averaged over the batch. Returns the scalar
    loss and the gradient at every stage output. Zero predicted probabilities
    at a target index are clamped at 1e-12 (counted, see ce_clamp_count).
    """
    global _ce_clamp_events
    if len(stage_ps) != spec.n_stages:
        raise ValueError("stage count does not match LossSpec")
    targets = np.asarray(targets, dtype=np.float64)
    b, k, _, n_levels = targets.shape
    w = spec.weights()
    scale = 1.0 / (b * spec.n_stages * k * n_levels)
    loss = 0.0
    grads = []
    for q, p in enumerate(stage_ps):
        if p.shape != targets.shape:
            raise ValueError("stage output shape does not match targets")
        clamped = np.maximum(p, CE_CLAMP_EPS)
        n_clamped = int(np.count_nonzero((p < CE_CLAMP_EPS) & (targets > 0)))
        if n_clamped:
            _ce_clamp_events += n_clamped
        loss += w[q] * scale * float(-(targets * np.log(clamped)).sum())
        # Gradient of the clamped loss: flat below the clamp threshold.
        g = np.where(p > CE_CLAMP_EPS, -w[q] * scale * targets / clamped, 0.0)
        grads.append(g)
    return loss, grads


@dataclass
class AdamState:
    """First/second moment accumulators keyed like Network.trainable()."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(net: Network, grads, state: AdamState, lr: float) -> Network:
    """One adaptive-moment update in place; returns the network for chaining."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for i, name, param in net.trainable():
        g = grads[i][name]
        key = (i, name)
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        param -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return net


# ---------------------------------------------------------------------------
# Checkpoint format (little endian):
#   magic b"SLNN", version u32, n_layers u32
#   per layer: kind u8 then
#     affine:        n_in u32, n_out u32
#     relu:          --
#     batchnorm:     dim u32, momentum f64, eps f64
#     softmax_split: n_heads u32, sizes u32 each
#   then all parameters as f64 in declaration order:
#     affine w (row major), b; batchnorm gamma, beta, running_mean, running_var
# ---------------------------------------------------------------------------

_MAGIC = b"SLNN"
_VERSION = 1
_KIND_CODES = {"affine": 0, "relu": 1, "batchnorm": 2, "softmax_split": 3}


def save_network(net: Network, fh) -> None:
    fh.write(_MAGIC)
    fh.write(struct.pack("<II", _VERSION, len(net.layers)))
    for layer in net.layers:
        fh.write(struct.pack("<B", _KIND_CODES[layer.kind]))
        if layer.kind == "affine":
            fh.write(struct.pack("<II", layer.n_in, layer.n_out))
        elif layer.kind == "batchnorm":
            fh.write(struct.pack("<Idd", layer.dim, layer.momentum, layer.eps))
        elif layer.kind == "softmax_split":
            fh.write(struct.pack("<I", len(layer.sizes)))
            fh.write(struct.pack(f"<{len(layer.sizes)}I", *layer.sizes))
    for layer in net.layers:
        if layer.kind == "affine":
            fh.write(layer.w.astype("<f8").tobytes())
            fh.write(layer.b.astype("<f8").tobytes())
        elif layer.kind == "batchnorm":
            for arr in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated network checkpoint")
    return data


def load_network(fh) -> Network:
    if _read_exact(fh, 4) != _MAGIC:
        raise ValueError("bad network checkpoint magic")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        (code,) = struct.unpack("<B", _read_exact(fh, 1))
        if code == 0:
            n_in, n_out = struct.unpack("<II", _read_exact(fh, 8))
            layers.append(Affine(np.zeros((n_out, n_in)), np.zeros(n_out)))
        elif code == 1:
            layers.append(Relu())
        elif code == 2:
            dim, momentum, eps = struct.unpack("<Idd", _read_exact(fh, 20))
            layers.append(BatchNorm(dim, momentum, eps))
        elif code == 3:
            (n_heads,) = struct.unpack("<I", _read_exact(fh, 4))
            sizes = struct.unpack(f"<{n_heads}I", _read_exact(fh, 4 * n_heads))
            layers.append(SoftmaxSplit(sizes))
        else:
            raise ValueError(f"unknown layer code {code}")
    for layer in layers:
        if layer.kind == "affine":
            n = layer.w.size
            layer.w = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(layer.w.shape).copy()
            layer.b = np.frombuffer(_read_exact(fh, 8 * layer.b.size), dtype="<f8").copy()
        elif layer.kind == "batchnorm":
            d = layer.dim
            layer.gamma = np.frombuffer(_read_exact(fh, 8 * d), dtype="<f8").copy()
            layer.beta = np.frombuffer(_read_exact(fh, 8 * d), dtype="<f8").copy()
            layer.running_mean = np.frombuffer(_read_exact(fh, 8 * d), dtype="<f8").copy()
            layer.running_var = np.frombuffer(_read_exact(fh, 8 * d), dtype="<f8").copy()
    return Network(layers)


def network_equal(a: Network, b: Network) -> bool:
    """Byte-level parameter identity (used to verify stage sharing and snapshots)."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind:
            return False
        for name in la.param_names:
            if not np.array_equal(getattr(la, name), getattr(lb, name)):
                return False
    return True
