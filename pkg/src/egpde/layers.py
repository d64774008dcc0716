"""Parameterised layers: linear maps, GRU/LSTM cells, multi-head self-attention, MLP.

All layers accept an optional leading batch axis.  Weights are Glorot-uniform,
biases zero.
"""

from __future__ import annotations

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Layer:
    """Anything that owns named parameter tensors or sub-layers."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list) and value and isinstance(value[0], Layer):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class LinearLayer(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None, bias: bool = True):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"degenerate linear layer {in_dim}->{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        w = glorot_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        self.weight = _param(w)
        self.bias = _param(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """y = x W^T + b applied to the trailing axis."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear: expected trailing dim {layer.in_dim}, got shape {x.shape}")
    return ad.linear(x, layer.weight, layer.bias)


class GRUCell(Layer):
    """Cho-style GRU with one bias per gate.

    u = sigmoid(W_u x + U_u h + b_u)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_c x + r * (U_c h) + b_c)
    h' = (1 - u) * h + u * c
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: Optional[np.random.Generator] = None):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        for gate in ("update", "reset", "candidate"):
            setattr(self, f"{gate}_x", LinearLayer(input_dim, hidden_dim, rng, bias=True))
            setattr(self, f"{gate}_h", LinearLayer(hidden_dim, hidden_dim, rng, bias=False))

    @staticmethod
    def count(input_dim: int, hidden_dim: int) -> int:
        return 3 * (hidden_dim * input_dim + hidden_dim * hidden_dim + hidden_dim)

    def initial_state(self, batch_shape: Tuple[int, ...] = ()) -> Tensor:
        return Tensor(np.zeros(batch_shape + (self.hidden_dim,)))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(self, x, h)

    def encode(self, seq: Tensor) -> Tensor:
        return gru_encode(self, seq)


def gru_step(p: GRUCell, x: Tensor, h: Tensor) -> Tensor:
    if x.shape[-1] != p.input_dim or h.shape[-1] != p.hidden_dim:
        raise ShapeError(f"gru_step: input {x.shape} / hidden {h.shape} do not match cell "
                         f"({p.input_dim}->{p.hidden_dim})")
    u = ad.sigmoid(p.update_x(x) + p.update_h(h))
    r = ad.sigmoid(p.reset_x(x) + p.reset_h(h))
    c = ad.tanh(p.candidate_x(x) + r * p.candidate_h(h))
    return (1.0 - u) * h + u * c


def _time_inputs(seq: Tensor, input_dim: int) -> List[Tensor]:
    """Split a sequence into per-step inputs.

    A trailing axis equal to ``input_dim`` means (..., T, input_dim);
    otherwise with input_dim == 1 the trailing axis is time: (..., T).
    """
    data = seq.data
    if input_dim == 1 and (data.ndim == 1 or data.shape[-1] != 1):
        steps = data.shape[-1]
        if seq.requires_grad:
            return [ad.slice_last(seq, t, t + 1) for t in range(steps)]
        return [Tensor._wrap(data[..., t:t + 1]) for t in range(steps)]
    if data.ndim < 2 or data.shape[-1] != input_dim:
        raise ShapeError(f"sequence of shape {data.shape} does not carry {input_dim} features per step")
    steps = data.shape[-2]
    if seq.requires_grad:
        return [ad.select(seq, t, axis=seq.ndim - 2) for t in range(steps)]
    return [Tensor._wrap(data[..., t, :]) for t in range(steps)]


def gru_encode(p: GRUCell, seq: Tensor) -> Tensor:
    """Final hidden state after running the cell over ``seq`` from a zero state."""
    inputs = _time_inputs(seq, p.input_dim)
    if not inputs:
        raise ShapeError("gru_encode: empty sequence")
    h = p.initial_state(inputs[0].shape[:-1])
    for x in inputs:
        h = gru_step(p, x, h)
    return h


class LSTMCell(Layer):
    """Standard LSTM (input, forget, cell, output gates), one bias per gate."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: Optional[np.random.Generator] = None):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        for gate in ("input", "forget", "cell", "output"):
            setattr(self, f"{gate}_x", LinearLayer(input_dim, hidden_dim, rng, bias=True))
            setattr(self, f"{gate}_h", LinearLayer(hidden_dim, hidden_dim, rng, bias=False))

    @staticmethod
    def count(input_dim: int, hidden_dim: int) -> int:
        return 4 * (hidden_dim * input_dim + hidden_dim * hidden_dim + hidden_dim)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        i = ad.sigmoid(self.input_x(x) + self.input_h(h))
        f = ad.sigmoid(self.forget_x(x) + self.forget_h(h))
        g = ad.tanh(self.cell_x(x) + self.cell_h(h))
        o = ad.sigmoid(self.output_x(x) + self.output_h(h))
        c_new = f * c + i * g
        return o * ad.tanh(c_new), c_new


class MLP(Layer):
    """linear -> tanh -> linear, width ``dim`` throughout."""

    def __init__(self, dim: int, rng: Optional[np.random.Generator] = None, hidden: Optional[int] = None):
        hidden = hidden or dim
        self.dim = dim
        self.hidden = LinearLayer(dim, hidden, rng)
        self.out = LinearLayer(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(p: MLP, x: Tensor) -> Tensor:
    if x.shape[-1] != p.dim:
        raise ShapeError(f"mlp: expected trailing dim {p.dim}, got shape {x.shape}")
    return p.out(ad.tanh(p.hidden(x)))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V, also returning the attention weights."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ShapeError("scaled_dot_attention: d_k is zero")
    if k.shape[-1] != d_k:
        raise ShapeError(f"scaled_dot_attention: Q {q.shape} and K {k.shape} differ in key width")
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d_k))
    weights = ad.softmax_rows(logits)
    return ad.matmul(weights, v), weights


class AttentionHead(Layer):
    # A key bias only shifts each logit row by a constant, which softmax
    # cancels; it would be a parameter with identically zero gradient.
    def __init__(self, d_model: int, d_k: int, d_v: int, rng: Optional[np.random.Generator] = None):
        self.query = LinearLayer(d_model, d_k, rng)
        self.key = LinearLayer(d_model, d_k, rng, bias=False)
        self.value = LinearLayer(d_model, d_v, rng)

    def __call__(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        return scaled_dot_attention(self.query(tokens), self.key(tokens), self.value(tokens))


class MultiHeadAttention(Layer):
    def __init__(self, d_model: int, num_heads: int, rng: Optional[np.random.Generator] = None):
        if num_heads < 1 or d_model % num_heads:
            raise ValueError(f"d_model={d_model} is not divisible by {num_heads} heads")
        self.d_model, self.num_heads = d_model, num_heads
        d_k = d_model // num_heads
        self.heads = [AttentionHead(d_model, d_k, d_k, rng) for _ in range(num_heads)]
        self.output = LinearLayer(num_heads * d_k, d_model, rng)

    def __call__(self, tokens: Tensor) -> Tuple[Tensor, List[Tensor]]:
        return multi_head_attention(self, tokens)


def multi_head_attention(p: MultiHeadAttention, tokens: Tensor) -> Tuple[Tensor, List[Tensor]]:
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ShapeError(f"multi_head_attention: need at least one token, got shape {tokens.shape}")
    outs, weights = [], []
    for head in p.heads:
        o, w = head(tokens)
        outs.append(o)
        weights.append(w)
    merged = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
    return p.output(merged), weights


class AttentionBlock(Layer):
    """Self-attention over exogenous variables, one token per variable.

    Each variable's length-T history is embedded to d_model by a shared
    linear map; the attended tokens are mean-pooled and projected to the
    latent width.
    """

    def __init__(self, window: int, d_model: int, num_heads: int, latent_dim: int,
                 rng: Optional[np.random.Generator] = None):
        self.window = window
        self.embed = LinearLayer(window, d_model, rng)
        self.attention = MultiHeadAttention(d_model, num_heads, rng)
        self.pool = LinearLayer(d_model, latent_dim, rng)

    @staticmethod
    def count(window: int, d_model: int, latent_dim: int) -> int:
        embed = d_model * window + d_model
        heads = 3 * d_model * d_model + 2 * d_model
        out = d_model * d_model + d_model
        pool = latent_dim * d_model + latent_dim
        return embed + heads + out + pool

    def __call__(self, x: Tensor) -> Tuple[Tensor, np.ndarray]:
        return att_block(self, x)


def att_block(p: AttentionBlock, x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Encode an exogenous window (..., T, N) into (z_x0, variable_weights).

    variable_weights[j] is the attention mass received by variable j,
    averaged over query tokens and heads; it sums to one.
    """
    if x.ndim < 2 or x.shape[-2] != p.window or x.shape[-1] < 1:
        raise ShapeError(f"att_block: expected (..., {p.window}, N>=1) window, got {x.shape}")
    tokens = p.embed(ad.transpose(x))
    attended, weights = multi_head_attention(p.attention, tokens)
    z = p.pool(ad.mean(attended, axis=attended.ndim - 2))
    per_head = np.stack([w.data for w in weights])
    variable_weights = per_head.mean(axis=-2).mean(axis=0)
    return z, variable_weights
