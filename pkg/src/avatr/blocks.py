"""Attention building blocks for the extraction models.

Implements scaled dot-product attention, multi-head attention over
disjoint channel groups, the sinusoidal positional-encoding table, and
the two residual blocks the models stack: ``SelfAttentionBlock`` refines
a frame/channel map against itself, ``ConditionalAttentionBlock``
additionally cross-attends to an encoder feature map with the speaker
avatar injected into its first query.

Blocks are pure functions of (inputs, parameters, train flag): no mode
state is stored, so concurrent read-only evaluation is safe.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class Module:
    """Minimal parameter container with recursive named discovery.

    Parameters are trainable ``Tensor`` attributes; submodules (or lists
    of them) are traversed in attribute insertion order, which fixes the
    registry order used by the optimizer and the checkpoint format.
    """

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            name = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_count(self):
        return sum(t.size for t in self.parameters())


def glorot(rng, fan_in, fan_out, shape=None, dtype=np.float32):
    """Glorot/Xavier uniform init; the draw is dtype-independent so the
    float64 shadow of a model sees the same values as its float32 twin."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
    return Tensor(data.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def attention(q, k, v):
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.

    Query rows select convex combinations of the value rows; the output
    therefore has Q's shape.
    """
    q, k, v = ad._as_tensor(q), ad._as_tensor(k), ad._as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", q.shape, k.shape, detail="query/key width")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("attention", k.shape, v.shape, detail="key/value rows")
    w = ad.softmax(ad.scalar_mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1])))
    return ad.matmul(w, v)


def attention_weights(q, k):
    """The softmax similarity matrix alone (rows sum to 1); test hook."""
    q, k = ad._as_tensor(q), ad._as_tensor(k)
    return ad.softmax(ad.scalar_mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1])))


def positional_encoding(n, width, dtype=np.float32):
    """Sinusoidal table: entry (pos, 2i) = sin(pos / 10000^(2i/width)) and
    (pos, 2i+1) the matching cosine.  Returned as a constant Tensor."""
    if width % 2 != 0:
        raise ConfigError(f"positional encoding needs an even width, got {width}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, width, 2, dtype=np.float64) / width)
    table = np.empty((n, width), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return Tensor(table.astype(dtype))


class MultiHeadAttention(Module):
    """Parallel attention over H disjoint channel groups, concatenated and
    fused by a joint output projection."""

    def __init__(self, width, heads, rng, dtype=np.float32):
        if heads < 1 or width % heads != 0:
            raise ConfigError(f"head count {heads} must divide width {width}")
        self.heads = heads
        self.head_width = width // heads
        self.wo = glorot(rng, width, width, dtype=dtype)
        self.bo = zeros_param((width,), dtype=dtype)

    def __call__(self, q, k, v):
        if self.heads == 1:
            fused = attention(q, k, v)
        else:
            hw = self.head_width
            parts = [
                attention(q[:, h * hw : (h + 1) * hw],
                          k[:, h * hw : (h + 1) * hw],
                          v[:, h * hw : (h + 1) * hw])
                for h in range(self.heads)
            ]
            fused = ad.concat(parts, axis=1)
        return ad.linear(fused, self.wo, self.bo)


class Mlp(Module):
    """Two linear layers with ReLU between; inner width is 4x the block
    width (the usual transformer ratio)."""

    def __init__(self, width, rng, dtype=np.float32, ratio=4):
        inner = ratio * width
        self.w1 = glorot(rng, width, inner, dtype=dtype)
        self.b1 = zeros_param((inner,), dtype=dtype)
        self.w2 = glorot(rng, inner, width, dtype=dtype)
        self.b2 = zeros_param((width,), dtype=dtype)

    def __call__(self, x):
        return ad.linear(ad.relu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNormParams(Module):
    def __init__(self, width, dtype=np.float32):
        self.gamma = ones_param((width,), dtype=dtype)
        self.beta = zeros_param((width,), dtype=dtype)

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class SelfAttentionBlock(Module):
    """One residual self-attention block (post-norm):

        Q, K, V = Linear(Z), Linear(Z), Linear(Z)
        Z'      = LayerNorm(Z + Dropout(MHA(Q, K, V)))
        out     = LayerNorm(Z' + Dropout(MLP(Z')))
    """

    def __init__(self, width, heads, dropout, rng, dtype=np.float32):
        self.width = width
        self.p = dropout
        self.wq = glorot(rng, width, width, dtype=dtype)
        self.bq = zeros_param((width,), dtype=dtype)
        self.wk = glorot(rng, width, width, dtype=dtype)
        self.bk = zeros_param((width,), dtype=dtype)
        self.wv = glorot(rng, width, width, dtype=dtype)
        self.bv = zeros_param((width,), dtype=dtype)
        self.mha = MultiHeadAttention(width, heads, rng, dtype=dtype)
        self.mlp = Mlp(width, rng, dtype=dtype)
        self.ln1 = LayerNormParams(width, dtype=dtype)
        self.ln2 = LayerNormParams(width, dtype=dtype)

    def __call__(self, z, train=False, rng=None):
        if z.shape[-1] != self.width:
            raise ShapeError("self_attention_block", z.shape, (self.width,))
        q = ad.linear(z, self.wq, self.bq)
        k = ad.linear(z, self.wk, self.bk)
        v = ad.linear(z, self.wv, self.bv)
        zhat = self.ln1(ad.add(z, ad.dropout(self.mha(q, k, v), self.p, train, rng)))
        return self.ln2(ad.add(zhat, ad.dropout(self.mlp(zhat), self.p, train, rng)))


class ConditionalAttentionBlock(Module):
    """Residual block with self-attention, cross-attention into an encoder
    feature map, and an MLP, each post-normed.

    The avatar is injected by adding it to every row of the first
    attention's query input before its linear projection; a zero avatar
    reduces the block to the plain conditional form.
    """

    def __init__(self, width, heads, dropout, rng, dtype=np.float32):
        self.width = width
        self.p = dropout
        self.wq1 = glorot(rng, width, width, dtype=dtype)
        self.bq1 = zeros_param((width,), dtype=dtype)
        self.wk1 = glorot(rng, width, width, dtype=dtype)
        self.bk1 = zeros_param((width,), dtype=dtype)
        self.wv1 = glorot(rng, width, width, dtype=dtype)
        self.bv1 = zeros_param((width,), dtype=dtype)
        self.mha1 = MultiHeadAttention(width, heads, rng, dtype=dtype)
        self.wq2 = glorot(rng, width, width, dtype=dtype)
        self.bq2 = zeros_param((width,), dtype=dtype)
        self.wk2 = glorot(rng, width, width, dtype=dtype)
        self.bk2 = zeros_param((width,), dtype=dtype)
        self.wv2 = glorot(rng, width, width, dtype=dtype)
        self.bv2 = zeros_param((width,), dtype=dtype)
        self.mha2 = MultiHeadAttention(width, heads, rng, dtype=dtype)
        self.mlp = Mlp(width, rng, dtype=dtype)
        self.ln1 = LayerNormParams(width, dtype=dtype)
        self.ln2 = LayerNormParams(width, dtype=dtype)
        self.ln3 = LayerNormParams(width, dtype=dtype)

    def __call__(self, y, z, avatar, train=False, rng=None):
        if y.shape[-1] != self.width or z.shape[-1] != self.width:
            raise ShapeError("conditional_attention_block", y.shape, z.shape, (self.width,))
        if avatar.shape != (self.width,):
            raise ShapeError("conditional_attention_block", avatar.shape, (self.width,),
                             detail="avatar width")
        injected = ad.add(y, ad.reshape(avatar, (1, self.width)))
        q1 = ad.linear(injected, self.wq1, self.bq1)
        k1 = ad.linear(y, self.wk1, self.bk1)
        v1 = ad.linear(y, self.wv1, self.bv1)
        ytil = self.ln1(ad.add(y, ad.dropout(self.mha1(q1, k1, v1), self.p, train, rng)))
        q2 = ad.linear(ytil, self.wq2, self.bq2)
        k2 = ad.linear(z, self.wk2, self.bk2)
        v2 = ad.linear(z, self.wv2, self.bv2)
        yhat = self.ln2(ad.add(ytil, ad.dropout(self.mha2(q2, k2, v2), self.p, train, rng)))
        return self.ln3(ad.add(yhat, ad.dropout(self.mlp(yhat), self.p, train, rng)))
