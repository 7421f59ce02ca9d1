"""Transformer building blocks on top of the tape engine."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor carrying its dotted path name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Minimal container: attributes that are Parameters or Modules are tracked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{k}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.b = Parameter(uniform_init(rng, d_in, (d_out,))) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear layer expects last dim {self.d_in}, got shape {x.shape}")
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, epsilon: float = 1e-6):
        if d <= 0:
            raise DimensionError("layer norm width must be positive")
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.epsilon)


def multi_head_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
                         heads: int, return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis.

    ``x`` is [..., L, d_model]. Each projection matrix is [d_model x d_model];
    head h uses columns h*dh:(h+1)*dh of Wq/Wk/Wv, which is the same as
    keeping separate per-head matrices.
    """
    if x.ndim < 2:
        raise DimensionError(f"attention input must be [..., L, d_model], got {x.shape}")
    L, d = x.shape[-2], x.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigurationError(f"d_model={d} is not divisible by heads={heads}")
    dh = d // heads
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        # [..., L, d] -> [..., heads, L, dh]
        return T.swapaxes(T.reshape(t, lead + (L, heads, dh)), -2, -3)

    q = split(T.matmul(x, Wq))
    k = split(T.matmul(x, Wk))
    v = split(T.matmul(x, Wv))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)
    merged = T.reshape(T.swapaxes(ctx, -2, -3), lead + (L, d))
    out = T.matmul(merged, Wo)
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if heads <= 0 or d_model % heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.Wq = Parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.Wk = Parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.Wv = Parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.Wo = Parameter(uniform_init(rng, d_model, (d_model, d_model)))

    def __call__(self, x: Tensor, return_weights: bool = False):
        return multi_head_attention(x, self.Wq, self.Wk, self.Wv, self.Wo, self.heads, return_weights)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.lin1 = Linear(d_model, d_ff, rng)
        self.lin2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        self.d_model = d_model
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.dropout = dropout
        self.training = False
        self._drop_rng = np.random.default_rng(int(rng.integers(2**32)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise DimensionError(f"encoder layer expects d_model={self.d_model}, got shape {x.shape}")
        rate = self.dropout if self.training else 0.0
        x = x + T.dropout(self.attn(self.ln1(x)), rate, self._drop_rng)
        x = x + T.dropout(self.ffn(self.ln2(x)), rate, self._drop_rng)
        return x


class EncoderStack(Module):
    def __init__(self, depth: int, d_model: int, heads: int, d_ff: int,
                 rng: np.random.Generator, dropout: float = 0.0):
        self.layers = [EncoderLayer(d_model, heads, d_ff, rng, dropout) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def train(self, mode: bool = True):
        for layer in self.layers:
            layer.training = mode


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(...)."""
    if length < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {length}")
    if d_model <= 0 or d_model % 2:
        raise ConfigurationError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe
