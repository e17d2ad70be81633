"""Registry of differentiable ops and models checked against central differences.

Every entry builds, from a seeded generator, a scalar function and the leaf
tensors it depends on.  Elementwise outputs are contracted with a fixed random
weight tensor so that every output coordinate contributes to the scalar.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (CrossModalFusion, EncoderLayer, MultiHeadAttention, dot_product_attention)
from .metrics import ccc_loss
from .models import GRULayer, ModelConfig, build_model, gru_cell
from .tensor import GradCheckReport, Tensor, finite_diff_check

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
REGISTRY: dict[str, Builder] = {}

FULL_MODEL = dict(seq_len=8, d_model=16, heads=2, feature_dim=6)

# Step for the central differences.  Losses near 1 carry ~1e-16 rounding per
# evaluation, so at 1e-5 entries with gradients below ~1e-7 drown in noise;
# 3e-5 balances that against truncation error across the registry.
SUITE_EPS = 3e-5


def register(name: str):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = fn
        return fn
    return deco


def _leaf(rng, *shape, low=None, high=None, away_from_zero=0.0):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.where(np.abs(data) < away_from_zero, np.sign(data + 1e-12) * away_from_zero, data)
    return T.parameter(data)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def _dims(rng, n=2, lo=2, hi=5):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))


def _unary(op, min_last=2, **leaf_kw):
    def build(rng):
        x = _leaf(rng, *_dims(rng)[:1], int(rng.integers(min_last, 6)), **leaf_kw)
        with T.no_grad():
            w = rng.standard_normal(op(x).shape)
        return (lambda: _contract(op(x), w)), [x]
    return build


def _binary(op, positive_rhs=False):
    def build(rng):
        m, n = _dims(rng)
        a = _leaf(rng, m, n)
        # the rhs broadcasts over the leading axis
        b = _leaf(rng, n, low=0.5, high=2.0) if positive_rhs else _leaf(rng, n)
        w = rng.standard_normal((m, n))
        return (lambda: _contract(op(a, b), w)), [a, b]
    return build


register("add")(_binary(T.add))
register("sub")(_binary(T.sub))
register("mul")(_binary(T.mul))
register("div")(_binary(T.div, positive_rhs=True))
register("scale")(_unary(lambda x: T.scale(x, 2.5)))
register("neg")(_unary(T.neg))
register("tanh")(_unary(T.tanh))
register("sigmoid")(_unary(T.sigmoid))
register("relu")(_unary(T.relu, away_from_zero=0.1))
register("exp")(_unary(T.exp))
register("log")(_unary(T.log, low=0.5, high=2.0))
register("square")(_unary(T.square))
register("sqrt")(_unary(T.sqrt, low=0.5, high=2.0))
register("sum")(_unary(lambda x: T.tsum(x, axis=0, keepdims=True)))
register("mean")(_unary(lambda x: T.mean(x, axis=-1, keepdims=True)))
register("swapaxes")(_unary(lambda x: T.swapaxes(x, 0, 1)))
register("reshape")(_unary(lambda x: T.reshape(x, (-1,))))
register("getitem")(_unary(lambda x: x[1:, ::2]))
register("getitem_fancy")(_unary(lambda x: x[np.array([0, 1, 0])]))
register("softmax")(_unary(T.softmax))
# a two-wide last axis normalizes to +-1 whatever the input, so use at least three
register("layer_norm_unit")(_unary(T.layer_norm, min_last=3))


@register("matmul")
def _matmul(rng):
    m, k, n = _dims(rng, 3)
    a, b = _leaf(rng, m, k), _leaf(rng, k, n)
    w = rng.standard_normal((m, n))
    return (lambda: _contract(T.matmul(a, b), w)), [a, b]


@register("matmul_batched")
def _matmul_batched(rng):
    bsz, m, k, n = _dims(rng, 4)
    a, b = _leaf(rng, bsz, m, k), _leaf(rng, k, n)
    w = rng.standard_normal((bsz, m, n))
    return (lambda: _contract(T.matmul(a, b), w)), [a, b]


@register("concat")
def _concat(rng):
    m, n1, n2 = _dims(rng, 3)
    a, b = _leaf(rng, m, n1), _leaf(rng, m, n2)
    w = rng.standard_normal((m, n1 + n2))
    return (lambda: _contract(T.concat([a, b], axis=1), w)), [a, b]


@register("stack")
def _stack(rng):
    m, n = _dims(rng)
    a, b = _leaf(rng, m, n), _leaf(rng, m, n)
    w = rng.standard_normal((m, 2, n))
    return (lambda: _contract(T.stack([a, b], axis=1), w)), [a, b]


@register("layer_norm")
def _layer_norm(rng):
    m, n = _dims(rng)[0], int(rng.integers(3, 6))
    x, g, b = _leaf(rng, m, n), _leaf(rng, n), _leaf(rng, n)
    w = rng.standard_normal((m, n))
    return (lambda: _contract(T.layer_norm(x, g, b), w)), [x, g, b]


@register("linear")
def _linear(rng):
    m, k, n = _dims(rng, 3)
    x, W, b = _leaf(rng, m, k), _leaf(rng, k, n), _leaf(rng, n)
    w = rng.standard_normal((m, n))
    return (lambda: _contract(T.linear(x, W, b), w)), [x, W, b]


@register("dot_product_attention")
def _dpa(rng):
    tk, tq, d = _dims(rng, 3)
    K, Q, V = _leaf(rng, tk, d), _leaf(rng, tq, d), _leaf(rng, tk, d)
    w = rng.standard_normal((tq, d))
    return (lambda: _contract(dot_product_attention(K, Q, V), w)), [K, Q, V]


@register("multi_head_attention")
def _mha(rng):
    t = int(rng.integers(3, 6))
    mha = MultiHeadAttention(4, 4, 2, rng)
    ks, qs = _leaf(rng, t, 4), _leaf(rng, t, 4)
    w = rng.standard_normal((t, 4))
    return (lambda: _contract(mha(ks, qs), w)), [ks, qs] + list(mha.parameters().values())


@register("encoder_layer")
def _encoder(rng):
    t = int(rng.integers(3, 6))
    layer = EncoderLayer(4, 2, 8, rng, dropout=0.0)
    x = _leaf(rng, t, 4)
    w = rng.standard_normal((t, 4))
    return (lambda: _contract(layer(x), w)), [x] + list(layer.parameters().values())


@register("cross_modal_fuse")
def _fuse(rng):
    t = int(rng.integers(3, 6))
    fusion = CrossModalFusion(4, 2, rng)
    a, v = _leaf(rng, t, 4), _leaf(rng, t, 4)
    w = rng.standard_normal((t, 4))
    return (lambda: _contract(fusion(a, v), w)), [a, v] + list(fusion.parameters().values())


@register("gru_cell_3_steps")
def _gru(rng):
    d_in, hidden = _dims(rng)
    layer = GRULayer(d_in, hidden, rng)
    xs = [_leaf(rng, 2, d_in) for _ in range(3)]
    h0 = _leaf(rng, 2, hidden, low=-0.9, high=0.9)
    w = rng.standard_normal((2, hidden))

    def f():
        h = h0
        for x in xs:
            h = gru_cell(layer, x, h)
        return _contract(h, w)

    return f, xs + [h0] + list(layer.parameters().values())


@register("ccc_loss")
def _ccc(rng):
    pred = T.parameter(np.tanh(rng.standard_normal((100, 2))))
    target = np.tanh(rng.standard_normal((100, 2)))
    return (lambda: ccc_loss(pred, target)), [pred]


def _full_model(rng, **overrides):
    s = FULL_MODEL
    cfg = ModelConfig(seq_len=s["seq_len"], d_model=s["d_model"], heads=s["heads"], dropout=0.0,
                      audio_dim=s["feature_dim"], video_dim=s["feature_dim"],
                      seed=int(rng.integers(0, 2**31)), **overrides)
    model = build_model(cfg).eval()
    audio = rng.standard_normal((s["seq_len"], s["feature_dim"]))
    video = rng.standard_normal((s["seq_len"], s["feature_dim"]))
    target = np.tanh(rng.standard_normal((s["seq_len"], 2)))
    return (lambda: ccc_loss(model(audio, video), target)), list(model.parameters().values())


@register("cross_modal_transformer")
def _transformer(rng):
    return _full_model(rng)


@register("gru_av_baseline")
def _gru_av(rng):
    return _full_model(rng, architecture="gru", gru_hidden=4)


@dataclass
class SuiteResult:
    reports: list[GradCheckReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def format(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.op_name:<26} max_rel_error={r.max_rel_error:.3e}"
                 for r in self.reports]
        failed = [r.op_name for r in self.reports if not r.passed]
        lines.append(f"{len(self.reports) - len(failed)}/{len(self.reports)} passed "
                     f"in {self.seconds:.1f}s" + (f"; failed: {', '.join(failed)}" if failed else ""))
        return "\n".join(lines)


def run_entry(name: str, seed: int = 0, eps: float = SUITE_EPS, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng([seed, sum(name.encode())])
    f, params = REGISTRY[name](rng)
    return finite_diff_check(f, params, eps=eps, tol=tol, op_name=name)


def run_suite(seed: int = 0, tol: float = 1e-4, names: list[str] | None = None,
              eps: float = SUITE_EPS) -> SuiteResult:
    start = time.perf_counter()
    reports = [run_entry(n, seed, eps=eps, tol=tol) for n in (names or list(REGISTRY))]
    return SuiteResult(reports, time.perf_counter() - start)
