"""Neural building blocks on top of :mod:`crowdflow.autodiff`.

Parameters are leaf :class:`Value` objects with ``requires_grad=True``.  A
:class:`Module` discovers them (and nested modules) from its attributes in
definition order, which fixes the parameter naming and iteration order used by
the optimizer and the checkpoint container.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value

ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "none": lambda x: x,
}


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


class Module:
    """Container that exposes the parameters of itself and its children."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Value):
                if attr.requires_grad:
                    yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(full + ".")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Value) and item.requires_grad:
                        yield f"{full}.{i}", item
            elif isinstance(attr, dict):
                for key in attr:
                    item = attr[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")
                    elif isinstance(item, Value) and item.requires_grad:
                        yield f"{full}.{key}", item

    def parameters(self) -> dict[str, Value]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _param(data: np.ndarray) -> Value:
    return Value(data, requires_grad=True)


class Affine(Module):
    """``y = x W^T + b`` with ``W`` of shape (out, in).

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in) if n_in > 0 else 0.0
        self.weight = _param(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = _param(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Value:
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of affine layers with a hidden activation and a linear output."""

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        out_activation: str = "none",
    ):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {list(dims)}")
        self.layers = [Affine(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation
        self.out_activation = out_activation
        self.dims = tuple(dims)

    def __call__(self, x) -> Value:
        act = ACTIVATIONS[self.activation]
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = act(h)
        return ACTIVATIONS[self.out_activation](h)


class LSTMCell(Module):
    """Single LSTM cell.

    The four gate blocks (input, forget, cell, output) are stacked row-wise in
    one (4*d_h, d_in + d_h) weight, each block being (d_h, d_in + d_h).
    """

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(d_h)
        self.weight = _param(rng.uniform(-bound, bound, size=(4 * d_h, d_in + d_h)))
        self.bias = _param(np.zeros(4 * d_h))
        self.d_in, self.d_h = d_in, d_h

    def gate_blocks(self) -> dict[str, np.ndarray]:
        d = self.d_h
        names = ("input", "forget", "cell", "output")
        return {n: self.weight.data[i * d:(i + 1) * d] for i, n in enumerate(names)}

    def __call__(self, x, h, c) -> tuple[Value, Value]:
        return lstm_step(self, x, h, c)


def lstm_step(params: LSTMCell, x, h, c) -> tuple[Value, Value]:
    x, h, c = ad.constant(x), ad.constant(h), ad.constant(c)
    d = params.d_h
    if x.shape[-1] != params.d_in or h.shape[-1] != d or c.shape[-1] != d:
        raise ad.ShapeError(
            f"lstm_step: input {x.shape}, hidden {h.shape}, cell {c.shape} "
            f"do not match d_in={params.d_in}, d_h={d}"
        )
    z = ad.linear(ad.concat([x, h], axis=-1), params.weight, params.bias)
    i = ad.sigmoid(z[..., 0:d])
    f = ad.sigmoid(z[..., d:2 * d])
    g = ad.tanh(z[..., 2 * d:3 * d])
    o = ad.sigmoid(z[..., 3 * d:4 * d])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def attention(q, k, v, scale_dim: int, bias=None, mask: np.ndarray | None = None):
    """Scaled dot-product attention of one query per row.

    ``q``: (N, d); ``k``: (N, M, d) or (M, d); ``v``: (N, M, dv) or (M, dv).
    ``bias`` is an additive logit term of shape (N, M); ``mask`` marks valid
    keys.  Returns the attended values (N, dv) and the weights (N, M).
    """
    q, k, v = ad.constant(q), ad.constant(k), ad.constant(v)
    if k.ndim == 2:
        logits = ad.matmul(q, _transpose2(k))
    else:
        logits = ad.vsum(ad.mul(ad.reshape(q, (q.shape[0], 1, q.shape[1])), k), axis=-1)
    logits = logits * (1.0 / math.sqrt(scale_dim))
    if bias is not None:
        logits = logits + bias
    if mask is None:
        weights = ad.softmax(logits, axis=-1)
    else:
        weights = ad.masked_softmax(logits, mask, axis=-1)
    if v.ndim == 2:
        out = ad.matmul(weights, v)
    else:
        w3 = ad.reshape(weights, weights.shape + (1,))
        out = ad.vsum(ad.mul(w3, v), axis=1)
    return out, weights


def _transpose2(x: Value) -> Value:
    # differentiable transpose of a 2-D value
    xd = x.data
    return ad._make(xd.T.copy(), (x,), lambda g: (g.T,))


def timestep_embedding(k, dim: int, max_period: float = 10000.0) -> Value:
    """Sinusoidal embedding of integer diffusion steps; constant, no gradient."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = k[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(k), 1))], axis=-1)
    return Value(emb)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.parameter = name


class Adam:
    """Adam with decoupled weight decay.

    Holds the first/second moment arrays per parameter, the step counter and
    the hyper-parameters; :meth:`step` applies one update using the ``.grad``
    of every registered parameter.
    """

    def __init__(
        self,
        params: dict[str, Value],
        lr: float = 1e-5,
        weight_decay: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        adam_update(self, self.params, {n: p.grad for n, p in self.params.items()})

    def state_records(self) -> dict[str, np.ndarray]:
        rec = {
            "adam/step": np.array([float(self.t)]),
            "adam/hyper": np.array([self.lr, self.weight_decay, self.beta1, self.beta2, self.eps]),
        }
        for name in self.params:
            rec[f"adam/m/{name}"] = self.m[name]
            rec[f"adam/v/{name}"] = self.v[name]
        return rec

    def load_state_records(self, rec: dict[str, np.ndarray]):
        self.t = int(rec["adam/step"][0])
        self.lr, self.weight_decay, self.beta1, self.beta2, self.eps = (float(x) for x in rec["adam/hyper"])
        for name in self.params:
            self.m[name] = np.array(rec[f"adam/m/{name}"]).reshape(self.params[name].shape)
            self.v[name] = np.array(rec[f"adam/v/{name}"]).reshape(self.params[name].shape)


def adam_update(state: Adam, params: dict[str, Value], grads: dict[str, np.ndarray]):
    """One in-place Adam step; raises if any gradient is non-finite."""
    for name, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
