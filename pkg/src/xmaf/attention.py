"""Scaled dot-product attention, transformer encoder layers and cross-modal fusion.

Scores are ``Q @ K^T / sqrt(d_head)`` with the softmax taken over keys, so
each output row is a convex combination of value rows.  Cross-modal fusion
runs two attention blocks whose keys/values come from one modality and whose
queries come from the other, then mixes the two branches with trainable
scalars ``alpha`` and ``beta``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


def attention_weights(K: Tensor, Q: Tensor, scaled: bool = True) -> Tensor:
    """Softmax-normalized scores of shape ``[..., t_q, t_k]``."""
    if K.shape[-1] != Q.shape[-1]:
        raise DimensionError(f"attention: key dim {K.shape} and query dim {Q.shape} differ")
    scores = T.matmul(Q, T.swapaxes(K, -1, -2))
    if scaled:
        scores = T.scale(scores, 1.0 / math.sqrt(K.shape[-1]))
    return T.softmax(scores, axis=-1)


def dot_product_attention(K: Tensor, Q: Tensor, V: Tensor, scaled: bool = True,
                          return_weights: bool = False):
    """Attend from each query row over the key rows; returns ``[..., t_q, d_v]``."""
    K, Q, V = T.as_tensor(K), T.as_tensor(Q), T.as_tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: keys {K.shape} and values {V.shape} differ in length")
    w = attention_weights(K, Q, scaled)
    out = T.matmul(w, V)
    return (out, w) if return_weights else out


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    """Bias-free projections ``wk, wq, wv`` (d_in -> d_model) and output ``wo``."""

    def __init__(self, d_in: int, d_model: int, heads: int, rng: np.random.Generator):
        if heads <= 0 or d_model % heads != 0:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.d_model = d_model
        self.wk = Linear(d_in, d_model, rng, bias=False)
        self.wq = Linear(d_in, d_model, rng, bias=False)
        self.wv = Linear(d_in, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = T.reshape(x, lead + (self.heads, self.d_model // self.heads))
        return T.swapaxes(x, -2, -3)

    def _merge(self, x: Tensor) -> Tensor:
        x = T.swapaxes(x, -2, -3)
        return T.reshape(x, x.shape[:-2] + (self.d_model,))

    def __call__(self, key_src: Tensor, query_src: Tensor, return_weights: bool = False):
        for name, src in (("key_src", key_src), ("query_src", query_src)):
            if src.shape[-1] != self.wk.d_in:
                raise DimensionError(f"{name} has dim {src.shape[-1]}, expected {self.wk.d_in}")
        K = self._split(self.wk(key_src))
        Q = self._split(self.wq(query_src))
        V = self._split(self.wv(key_src))
        ctx, w = dot_product_attention(K, Q, V, return_weights=True)
        out = self.wo(self._merge(ctx))
        return (out, w) if return_weights else out


def multi_head_attention(params: MultiHeadAttention, key_src: Tensor, query_src: Tensor) -> Tensor:
    return params(key_src, query_src)


class EncoderLayer(Module):
    """Pre-norm block: ``x + MHA(LN(x))`` followed by ``x + FFN(LN(x))``."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        if d_ff < d_model:
            raise ConfigError(f"d_ff={d_ff} must be >= d_model={d_model}")
        self.attn = MultiHeadAttention(d_model, d_model, heads, rng)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, T.dropout(self.attn(h, h), self.dropout, self.rng, self.training))
        h = self.ff2(T.relu(self.ff1(self.ln2(x))))
        return T.add(x, T.dropout(h, self.dropout, self.rng, self.training))


def encoder_layer_forward(params: EncoderLayer, x: Tensor) -> Tensor:
    return params(x)


class Encoder(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, layers: int,
                 rng: np.random.Generator, dropout: float = 0.1):
        self.layers = [EncoderLayer(d_model, heads, d_ff, rng, dropout) for _ in range(layers)]
        self.norm = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class CrossModalFusion(Module):
    """Two opposite-direction attention branches mixed as ``alpha*b1 + beta*b2``.

    ``cross_av`` takes keys/values from audio and queries from video;
    ``cross_va`` takes keys/values from video and queries from audio.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 alpha: float = 0.5, beta: float = 0.5):
        self.cross_av = MultiHeadAttention(d_model, d_model, heads, rng)
        self.cross_va = MultiHeadAttention(d_model, d_model, heads, rng)
        self.alpha = T.parameter(alpha)
        self.beta = T.parameter(beta)

    def branches(self, audio_enc: Tensor, video_enc: Tensor) -> tuple[Tensor, Tensor]:
        if audio_enc.shape[:-1] != video_enc.shape[:-1]:
            raise AlignmentError(
                f"audio {audio_enc.shape} and video {video_enc.shape} are not frame-aligned")
        b1 = self.cross_av(audio_enc, video_enc)
        b2 = self.cross_va(video_enc, audio_enc)
        return b1, b2

    def __call__(self, audio_enc: Tensor, video_enc: Tensor) -> Tensor:
        b1, b2 = self.branches(audio_enc, video_enc)
        return T.add(T.mul(self.alpha, b1), T.mul(self.beta, b2))


def cross_modal_fuse(params: CrossModalFusion, audio_enc: Tensor, video_enc: Tensor) -> Tensor:
    return params(audio_enc, video_enc)
