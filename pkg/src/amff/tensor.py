"""Dense float64 primitives shared by every differentiable module.

Vectors are 1-D float64 ndarrays, matrices are row-major 2-D float64
ndarrays.  All gradients in this package are hand-derived, so the
finite-difference checker here is the single source of truth for their
correctness.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed yields an identical stream.

    ``seed`` may be an int or a tuple of ints, the latter deriving an
    independent substream (used for per-epoch shuffling and similar).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def as_vector(x, name: str = "vector") -> Array:
    """Validate and return ``x`` as a finite, non-empty 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"{name}: expected non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name}: contains non-finite entries")
    return v


def as_matrix(x, name: str = "matrix") -> Array:
    """Validate and return ``x`` as a finite, non-empty 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"{name}: expected non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: contains non-finite entries")
    return m


def affine_forward(w: Array, b: Array, x: Array) -> Array:
    """Return ``w @ x + b`` after shape validation."""
    w = as_matrix(w, "w")
    b = as_vector(b, "b")
    x = as_vector(x, "x")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"affine: w has {w.shape[1]} columns but x has length {x.shape[0]}")
    if w.shape[0] != b.shape[0]:
        raise ShapeError(f"affine: w has {w.shape[0]} rows but b has length {b.shape[0]}")
    return w @ x + b


def softmax(v: Array) -> Array:
    """Numerically stable softmax of a 1-D vector.

    The maximum entry is subtracted before exponentiation so saturated
    logits cannot overflow; the output always sums to 1 within 1e-12.
    """
    v = as_vector(v, "softmax input")
    e = np.exp(v - v.max())
    return e / e.sum()


def finite_diff_check(
    f: Callable[[Array], float],
    x: Array,
    analytic_grad: Array,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central finite differences.

    Returns the maximum over coordinates of
    ``|central_difference - analytic| / max(1, |analytic|)``.
    Central differences are used for their O(eps^2) truncation error.
    """
    if eps <= 0:
        raise ConfigError(f"finite_diff_check: eps must be positive, got {eps}")
    x = as_vector(x, "x")
    g = as_vector(analytic_grad, "analytic_grad")
    if x.shape != g.shape:
        raise ShapeError(f"finite_diff_check: x {x.shape} vs grad {g.shape}")
    worst = 0.0
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = eps
        hi = float(f(x + step))
        lo = float(f(x - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"finite_diff_check: f non-finite at coordinate {k}")
        cd = (hi - lo) / (2.0 * eps)
        err = abs(cd - g[k]) / max(1.0, abs(g[k]))
        worst = max(worst, err)
    return worst
