"""Concordance correlation coefficient (metric and loss) and Fisher z-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy.stats import norm

from . import tensor as T
from .errors import ContractError, DegenerateLossError, DimensionError, InfinityGuardError
from .tensor import Tensor

METRIC_CSV_HEADER = ["model_id", "split", "ccc_valence", "ccc_arousal", "n_frames"]


@dataclass(frozen=True)
class CccResult:
    rho: float
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    ccc: float
    degenerate: bool = False


@dataclass(frozen=True)
class SignificanceResult:
    z1: float
    z2: float
    z_stat: float
    p_value: float
    significant: bool


def ccc(x, y) -> CccResult:
    """Concordance between two series using population moments.

    A series with zero spread yields ``ccc = 0`` with ``degenerate`` set.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError(f"ccc: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError("ccc: need at least two samples")
    mx, my = x.mean(), y.mean()
    # a constant series can still produce a tiny nonzero std from rounding in the mean
    sx = 0.0 if np.all(x == x[0]) else x.std()
    sy = 0.0 if np.all(y == y[0]) else y.std()
    if sx == 0.0 or sy == 0.0:
        return CccResult(0.0, float(mx), float(my), float(sx), float(sy), 0.0, True)
    cov = np.mean((x - mx) * (y - my))
    rho = float(np.clip(cov / (sx * sy), -1.0, 1.0))
    value = 2.0 * cov / (sx * sx + sy * sy + (mx - my) ** 2)
    return CccResult(rho, float(mx), float(my), float(sx), float(sy), float(value))


def ccc_tensor(x: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    """Differentiable CCC reduced along ``axis``."""
    mx = T.mean(x, axis=axis, keepdims=True)
    my = T.mean(y, axis=axis, keepdims=True)
    xc = T.sub(x, mx)
    yc = T.sub(y, my)
    cov = T.mean(T.mul(xc, yc), axis=axis)
    vx = T.mean(T.square(xc), axis=axis)
    vy = T.mean(T.square(yc), axis=axis)
    gap = T.square(T.sub(T.mean(x, axis=axis), T.mean(y, axis=axis)))
    return T.div(T.scale(cov, 2.0), T.add(T.add(vx, vy), gap))


def ccc_loss(pred: Tensor, target) -> Tensor:
    """``1 - mean CCC`` over every (sequence, dimension) pair.

    ``pred`` and ``target`` are ``[T, 2]`` or ``[B, T, 2]``; the CCC is taken
    along time for each sequence and output dimension.
    """
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"ccc_loss: pred {pred.shape} vs target {target.shape}")
    if not np.all(np.isfinite(target.data)):
        raise ContractError("ccc_loss: target is not finite")
    if np.any(np.all(target.data == target.data[..., :1, :], axis=-2)):
        raise DegenerateLossError("ccc_loss: a target sequence has zero variance")
    per = ccc_tensor(pred, target, axis=-2)
    return T.sub(1.0, T.mean(per))


def fisher_z_test(ccc1: float, n1: int, ccc2: float, n2: int, alpha: float = 0.01) -> SignificanceResult:
    """Two-sided test for a difference between two correlation-like scores."""
    for c in (ccc1, ccc2):
        if not abs(c) < 1.0:
            raise InfinityGuardError(f"fisher_z_test: |ccc| must be < 1, got {c}")
    if n1 <= 3 or n2 <= 3:
        raise ContractError(f"fisher_z_test: sample sizes must exceed 3 (got {n1}, {n2})")
    z1, z2 = math.atanh(ccc1), math.atanh(ccc2)
    z = (z1 - z2) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return SignificanceResult(z1, z2, z, p, p < alpha)


def write_metric_rows(fh: TextIO, rows: Iterable[dict]) -> None:
    writer = csv.DictWriter(fh, fieldnames=METRIC_CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        for key in ("ccc_valence", "ccc_arousal"):
            out[key] = repr(float(out[key]))
        writer.writerow(out)
