"""Transformer encoder building blocks expressed over :mod:`mmfuse.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


def positional_encoding(seq_len, d_model):
    """Sinusoidal position table of shape (seq_len, d_model), constant."""
    if seq_len < 1 or d_model < 1:
        raise ConfigurationError("positional_encoding: seq_len and d_model must be >= 1")
    if d_model % 2:
        raise ConfigurationError(f"positional_encoding: d_model must be even, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, in_dim, out_dim):
        return cls(T.parameter(xavier_uniform(rng, in_dim, out_dim)), T.parameter(np.zeros(out_dim)))

    def named_parameters(self, prefix):
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}


def linear(x, p):
    return T.matmul(x, p.weight) + p.bias


@dataclass
class EncoderLayerParams:
    qkv: LinearParams
    out: LinearParams
    ff1: LinearParams
    ff2: LinearParams
    ln1_gain: Tensor
    ln1_shift: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor
    heads: int
    d_model: int = field(init=False)

    def __post_init__(self):
        self.d_model = self.qkv.weight.shape[0]
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by heads={self.heads}"
            )

    @classmethod
    def init(cls, rng, d_model, heads, ff_dim=None):
        if heads < 1 or d_model % heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
        ff_dim = ff_dim or 4 * d_model
        # q, k and v blocks get their own fan so each behaves like a d->d projection
        qkv_w = np.concatenate([xavier_uniform(rng, d_model, d_model) for _ in range(3)], axis=1)
        qkv = LinearParams(T.parameter(qkv_w), T.parameter(np.zeros(3 * d_model)))
        return cls(
            qkv=qkv,
            out=LinearParams.init(rng, d_model, d_model),
            ff1=LinearParams.init(rng, d_model, ff_dim),
            ff2=LinearParams.init(rng, ff_dim, d_model),
            ln1_gain=T.parameter(np.ones(d_model)),
            ln1_shift=T.parameter(np.zeros(d_model)),
            ln2_gain=T.parameter(np.ones(d_model)),
            ln2_shift=T.parameter(np.zeros(d_model)),
            heads=heads,
        )

    def named_parameters(self, prefix):
        out = {}
        for name in ("qkv", "out", "ff1", "ff2"):
            out.update(getattr(self, name).named_parameters(f"{prefix}/{name}"))
        for name in ("ln1_gain", "ln1_shift", "ln2_gain", "ln2_shift"):
            out[f"{prefix}/{name}"] = getattr(self, name)
        return out


def attention(q, k, v, return_weights=False):
    """Scaled dot-product attention over the last two axes."""
    d_k = q.shape[-1]
    if d_k == 0:
        raise ConfigurationError("attention: key dimension is zero")
    if k.shape[-1] != d_k or v.shape[-1] != d_k:
        raise DimensionError(f"attention: q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: k and v lengths differ: {k.shape}, {v.shape}")
    scores = T.matmul(q, T.transpose_last2(k)) * (1.0 / np.sqrt(d_k))
    weights = T.softmax_lastdim(scores)
    out = T.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _split_heads(x, heads):
    b, n, d = x.shape
    return T.swapaxes(T.reshape(x, (b, n, heads, d // heads)), 1, 2)


def _merge_heads(x):
    b, h, n, dk = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, n, h * dk))


def multi_head_attention(x, p, return_weights=False):
    if x.ndim != 3 or x.shape[-1] != p.d_model:
        raise DimensionError(f"multi_head_attention: expected (B, L, {p.d_model}), got {x.shape}")
    d = p.d_model
    qkv = linear(x, p.qkv)
    q = _split_heads(T.slice_axis(qkv, -1, 0, d), p.heads)
    k = _split_heads(T.slice_axis(qkv, -1, d, 2 * d), p.heads)
    v = _split_heads(T.slice_axis(qkv, -1, 2 * d, 3 * d), p.heads)
    heads, weights = attention(q, k, v, return_weights=True)
    out = linear(_merge_heads(heads), p.out)
    if return_weights:
        return out, weights
    return out


def encoder_layer(x, p):
    # pre-norm residual wiring
    h = T.layer_norm(x, p.ln1_gain, p.ln1_shift)
    x = x + multi_head_attention(h, p)
    h = T.layer_norm(x, p.ln2_gain, p.ln2_shift)
    return x + linear(T.gelu(linear(h, p.ff1)), p.ff2)


def encoder_stack(x, layers):
    if not layers:
        raise ConfigurationError("encoder_stack needs at least one layer")
    d = layers[0].d_model
    if any(layer.d_model != d for layer in layers):
        raise ConfigurationError("encoder_stack layers disagree on d_model")
    for layer in layers:
        x = encoder_layer(x, layer)
    return x


def init_stack(rng, n_layers, d_model, heads, ff_dim=None):
    return [EncoderLayerParams.init(rng, d_model, heads, ff_dim) for _ in range(n_layers)]


def stack_parameters(layers, prefix):
    out = {}
    for i, layer in enumerate(layers):
        out.update(layer.named_parameters(f"{prefix}/layer{i}"))
    return out


def count_parameters(named):
    return int(sum(t.data.size for t in named.values()))
