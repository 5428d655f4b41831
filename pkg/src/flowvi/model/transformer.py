"""Pre-LN Transformer encoder/decoder blocks on the numcore tape."""

from __future__ import annotations

import numpy as np

from flowvi import numcore as nc
from flowvi.errors import ContractError
from flowvi.numcore import ACTIVATIONS, LayerNorm, Linear, Module, Tensor

NEG_INF = -1e9  # additive mask; exp underflows to exactly 0 after the max shift


def sinusoidal_positions(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


def key_padding_mask(mask: np.ndarray) -> np.ndarray:
    """(B, m) bool -> (B, 1, 1, m) additive mask."""
    return np.where(mask, 0.0, NEG_INF)[:, None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, self_attn: bool = True):
        if d % n_heads:
            raise ContractError(f"model width {d} not divisible by {n_heads} heads")
        self.d, self.h = d, n_heads
        self.self_attn = self_attn
        if self_attn:
            self.qkv = Linear(d, 3 * d, rng)
        else:
            self.q = Linear(d, d, rng)
            self.kv = Linear(d, 2 * d, rng)
        self.o = Linear(d, d, rng)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return nc.transpose(nc.reshape(x, (b, t, self.h, self.d // self.h)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor | None, mask: np.ndarray | None) -> Tensor:
        if self.self_attn:
            q, k, v = nc.split(self.qkv(x), [self.d] * 3, axis=-1)
        else:
            q = self.q(x)
            k, v = nc.split(self.kv(memory), [self.d] * 2, axis=-1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        scores = nc.matmul(q, nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d // self.h))
        if mask is not None:
            scores = scores + mask
        ctx = nc.matmul(nc.softmax(scores, axis=-1), v)
        b, _, t, _ = ctx.shape
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, self.d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, activation: str = "gelu"):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ACTIVATIONS[self.activation](self.fc1(x)))


class EncoderBlock(Module):
    def __init__(self, d, n_heads, d_ff, rng, dropout=0.0, activation="gelu"):
        self.ln1, self.ln2 = LayerNorm(d), LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ff = FeedForward(d, d_ff, rng, activation)
        self.dropout = dropout

    def __call__(self, x, mask, rng=None):
        drop = lambda t: nc.dropout(t, self.dropout, rng, self.training)  # noqa: E731
        x = x + drop(self.attn(self.ln1(x), None, mask))
        return x + drop(self.ff(self.ln2(x)))


class DecoderBlock(Module):
    def __init__(self, d, n_heads, d_ff, rng, dropout=0.0, activation="gelu"):
        self.ln1, self.ln2, self.ln3 = LayerNorm(d), LayerNorm(d), LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng, self_attn=False)
        self.ff = FeedForward(d, d_ff, rng, activation)
        self.dropout = dropout

    def __call__(self, y, memory, self_mask, mem_mask, rng=None):
        drop = lambda t: nc.dropout(t, self.dropout, rng, self.training)  # noqa: E731
        y = y + drop(self.self_attn(self.ln1(y), None, self_mask))
        y = y + drop(self.cross_attn(self.ln2(y), memory, mem_mask))
        return y + drop(self.ff(self.ln3(y)))
