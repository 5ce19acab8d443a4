"""Flat parameter-vector arithmetic and the Pearson similarity measure.

A parameter vector is a 1-D float64 numpy array. Models, gradients and
control vectors are all carried in this form, so every operation here is a
pure function over immutable inputs and is safe to call concurrently.

Pearson correlation uses population moments (divide by N). The sample/
population factor cancels in the covariance-over-sigmas ratio, and the
population form makes the small hand-checked cases exact.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .errors import AllWeightsZero, DimensionMismatch, ZeroVariance

ParamVector = np.ndarray


def as_vector(values) -> ParamVector:
    """Coerce a sequence to a float64 parameter vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _check_same_dim(a: ParamVector, b: ParamVector) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return a*x + y elementwise. Inputs are left unmodified."""
    x = as_vector(x)
    y = as_vector(y)
    _check_same_dim(x, y)
    if not np.isfinite(a):
        raise ValueError(f"scale factor must be finite, got {a}")
    return a * x + y


def pearson_corr(a: ParamVector, b: ParamVector) -> float:
    """Pearson correlation coefficient of two vectors, clamped to [-1, 1].

    Computed as Cov(a, b) / (sigma(a) * sigma(b)) with population moments.
    The deviation products commute elementwise, so the result is bit-equal
    under argument swap. Raises ZeroVariance for a constant input: a
    constant parameter vector means a broken model, and callers are
    expected to map it to "not similar to anything" rather than 0.
    """
    a = as_vector(a)
    b = as_vector(b)
    _check_same_dim(a, b)
    if a.shape[0] < 2:
        raise DimensionMismatch("correlation needs at least 2 entries")
    # check constancy structurally: the mean of n equal floats can round
    # a hair off the constant, leaving a tiny nonzero "variance" of pure
    # rounding noise that the == 0.0 test below would wave through
    if np.all(a == a[0]):
        raise ZeroVariance("first vector is constant")
    if np.all(b == b[0]):
        raise ZeroVariance("second vector is constant")
    da = a - a.mean()
    db = b - b.mean()
    var_a = float(np.mean(da * da))
    var_b = float(np.mean(db * db))
    if var_a == 0.0:
        raise ZeroVariance("first vector is constant")
    if var_b == 0.0:
        raise ZeroVariance("second vector is constant")
    cov = float(np.mean(da * db))
    r = cov / np.sqrt(var_a * var_b)
    # float accumulation can overshoot by ~1e-16; downstream threshold
    # comparisons must never see |r| > 1
    return float(min(1.0, max(-1.0, r)))


def weighted_mean(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Return (sum_i w_i v_i) / (sum_i w_i) for nonnegative weights."""
    if len(vectors) == 0:
        raise ValueError("weighted_mean of zero vectors")
    if len(vectors) != len(weights):
        raise DimensionMismatch(
            f"{len(vectors)} vectors but {len(weights)} weights"
        )
    vs = [as_vector(v) for v in vectors]
    for v in vs[1:]:
        _check_same_dim(vs[0], v)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = float(w.sum())
    if total == 0.0:
        raise AllWeightsZero("all weights are zero")
    out = np.zeros_like(vs[0])
    for wi, vi in zip(w, vs):
        out += wi * vi
    return out / total
