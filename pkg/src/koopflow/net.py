"""Minimal feed-forward network machinery in float64 numpy.

An Mlp is a chain of affine layers with ReLU on hidden layers and identity on
the output. Forward, cached forward, and exact reverse-mode backward over a
batch are provided as building blocks; composite losses assemble their own
gradients from these. All operations use row-vector convention: a batch is
(B, dim), weights are (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFinite


@dataclass
class Mlp:
    weights: list  # W_l of shape (dims[l+1], dims[l])
    biases: list  # b_l of shape (dims[l+1],)

    @property
    def dims(self) -> tuple:
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(dims, rng) -> Mlp:
    """Uniform fan-in-scaled weights (U(-1/sqrt(fan_in), +1/sqrt(fan_in))), zero biases."""
    if len(dims) < 2:
        raise ValueError("dims must chain at least one affine layer")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def param_count(dims) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.in_dim:
        raise DimensionMismatch(f"input has dim {x.shape[-1]}, network expects {net.in_dim}")
    return x


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Affine/ReLU chain; accepts a single vector or a (B, in_dim) batch."""
    x = _check_input(net, x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


@dataclass
class ForwardCache:
    """Everything backward needs: layer inputs and hidden pre-activations."""

    inputs: list = field(default_factory=list)  # input to each affine layer
    pre: list = field(default_factory=list)  # pre-activations of hidden layers


def mlp_forward_cached(net: Mlp, x: np.ndarray):
    x = _check_input(net, x)
    if x.ndim != 2:
        raise DimensionMismatch("cached forward expects a (B, in_dim) batch")
    cache = ForwardCache()
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if l < last:
            cache.pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h, cache


def mlp_backward(net: Mlp, cache: ForwardCache, grad_out: np.ndarray):
    """Exact reverse pass: returns (grad wrt input batch, [(dW, db) per layer])."""
    grads = [None] * len(net.weights)
    g = grad_out
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            g = g * (cache.pre[l] > 0.0)
        dw = g.T @ cache.inputs[l]
        db = g.sum(axis=0)
        grads[l] = (dw, db)
        g = g @ net.weights[l]
    return g, grads


def min_hidden_preactivation(cache: ForwardCache) -> float:
    """Smallest |pre-activation| seen; guards finite-difference checks near ReLU kinks."""
    if not cache.pre:
        return np.inf
    return min(float(np.min(np.abs(z))) for z in cache.pre)


# ---------------------------------------------------------------------------
# Flat parameter vector with a named segment layout.


@dataclass(frozen=True)
class ParamLayout:
    names: tuple
    shapes: tuple
    offsets: tuple
    total: int

    @classmethod
    def build(cls, named_shapes) -> "ParamLayout":
        names, shapes, offsets = [], [], []
        pos = 0
        for name, shape in named_shapes:
            names.append(name)
            shapes.append(tuple(shape))
            offsets.append(pos)
            pos += int(np.prod(shape))
        return cls(tuple(names), tuple(shapes), tuple(offsets), pos)

    def segment(self, flat: np.ndarray, name: str) -> np.ndarray:
        i = self.names.index(name)
        start = self.offsets[i]
        size = int(np.prod(self.shapes[i]))
        return flat[start : start + size].reshape(self.shapes[i])


def pack(layout: ParamLayout, arrays) -> np.ndarray:
    flat = np.empty(layout.total)
    for name, shape, off in zip(layout.names, layout.shapes, layout.offsets):
        a = arrays[name]
        if tuple(a.shape) != shape:
            raise DimensionMismatch(f"segment {name}: expected shape {shape}, got {a.shape}")
        size = int(np.prod(shape))
        flat[off : off + size] = a.ravel()
    return flat


def unpack(layout: ParamLayout, flat: np.ndarray) -> dict:
    if flat.shape != (layout.total,):
        raise DimensionMismatch(f"flat vector has length {flat.shape}, layout needs {layout.total}")
    out = {}
    for name, shape, off in zip(layout.names, layout.shapes, layout.offsets):
        size = int(np.prod(shape))
        out[name] = flat[off : off + size].reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# Adam.


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam update with bias correction; mutates state, returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatch("params, grads, and moments must share a length")
    if not np.isfinite(grads).all():
        raise NonFinite("gradient contains non-finite entries")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_difference_grad(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss over a flat parameter vector.

    The independent oracle for every analytic gradient in this package.
    """
    g = np.empty_like(params)
    p = params.copy()
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        up = loss_fn(p)
        p[i] = orig - h
        down = loss_fn(p)
        p[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g
