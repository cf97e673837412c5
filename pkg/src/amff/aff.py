"""Adaptive fusion of the three scale features.

The three feature vectors are stacked into a (3, D) tensor, pushed
row-wise through a shared two-layer perceptron (linear, ReLU, linear),
and a softmax across the scale axis turns each feature channel's three
logits into convex weights.  The fused feature is the per-channel
weighted sum, so it always lies inside the min/max envelope of its
inputs.  Both passes are hand-derived; the backward includes the
softmax Jacobian and the shared-weight accumulation across rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Array, as_vector

_SIMPLEX_TOL = 1e-12


@dataclass
class AffParams:
    """Weights-generator parameters: D -> hidden -> D applied per row."""

    w1: Array  # (hidden, dim)
    b1: Array  # (hidden,)
    w2: Array  # (dim, hidden)
    b2: Array  # (dim,)

    def __post_init__(self):
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (d, h) or self.b2.shape != (d,):
            raise ShapeError(
                f"AffParams: inconsistent shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


@dataclass
class AffGrads:
    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass(frozen=True)
class AffCache:
    """Forward intermediates required by the backward pass."""

    stacked: Array  # (3, dim) rows: 0.5x, 1.0x, 1.5x features
    pre1: Array     # (3, hidden) first-layer pre-activations
    hidden: Array   # (3, hidden) ReLU outputs
    logits: Array   # (3, dim)
    weights: Array  # (3, dim) per-channel simplex over the scale axis


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> Array:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_aff_params(dim: int, hidden: int = 256, rng: np.random.Generator | None = None) -> AffParams:
    """Glorot-uniform weights, zero biases; initial fusion weights ~ 1/3."""
    if rng is None:
        raise ValueError("init_aff_params requires an explicit rng")
    return AffParams(
        w1=glorot_uniform(rng, hidden, dim),
        b1=np.zeros(hidden),
        w2=glorot_uniform(rng, dim, hidden),
        b2=np.zeros(dim),
    )


def aff_forward(f_05, f_10, f_15, params: AffParams) -> tuple[Array, AffCache]:
    """Fuse three equal-length scale features into one vector."""
    f_05 = as_vector(f_05, "f_05")
    f_10 = as_vector(f_10, "f_10")
    f_15 = as_vector(f_15, "f_15")
    if not (f_05.shape == f_10.shape == f_15.shape):
        raise ShapeError(
            f"aff_forward: mismatched dims {f_05.shape}, {f_10.shape}, {f_15.shape}"
        )
    if f_05.shape[0] != params.dim:
        raise ShapeError(f"aff_forward: features dim {f_05.shape[0]} vs params dim {params.dim}")

    stacked = np.stack((f_05, f_10, f_15))           # (3, D)
    pre1 = stacked @ params.w1.T + params.b1         # (3, h)
    hidden = np.maximum(pre1, 0.0)
    logits = hidden @ params.w2.T + params.b2        # (3, D)

    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=0, keepdims=True)

    col_sums = weights.sum(axis=0)
    if np.any(weights < 0.0) or np.max(np.abs(col_sums - 1.0)) > _SIMPLEX_TOL:
        raise NumericError("aff_forward: scale weights left the simplex")

    fused = (weights * stacked).sum(axis=0)
    return fused, AffCache(stacked, pre1, hidden, logits, weights)


def aff_backward(cache: AffCache, params: AffParams, d_fused) -> tuple[AffGrads, Array, Array, Array]:
    """Exact gradients of a scalar loss w.r.t. params and the three inputs.

    ``d_fused`` is the upstream gradient w.r.t. the fused feature.
    Each input receives a direct mixing term (its fusion weight times
    the upstream gradient) plus the path back through the weights
    generator.
    """
    d_fused = as_vector(d_fused, "d_fused")
    if d_fused.shape[0] != params.dim:
        raise ShapeError(f"aff_backward: d_fused dim {d_fused.shape[0]} vs params dim {params.dim}")
    if cache.stacked.shape != (3, params.dim):
        raise ShapeError("aff_backward: cache does not match params")

    stacked, weights = cache.stacked, cache.weights
    d_weights = d_fused[None, :] * stacked           # (3, D)

    # Softmax Jacobian per channel (columns are independent 3-simplices).
    inner = (weights * d_weights).sum(axis=0, keepdims=True)
    d_logits = weights * (d_weights - inner)

    db2 = d_logits.sum(axis=0)
    dw2 = d_logits.T @ cache.hidden                  # (D, h)
    d_hidden = d_logits @ params.w2                  # (3, h)
    d_pre1 = d_hidden * (cache.pre1 > 0.0)
    db1 = d_pre1.sum(axis=0)
    dw1 = d_pre1.T @ stacked                         # (h, D)
    d_stacked = d_pre1 @ params.w1                   # weights-generator path

    d_inputs = weights * d_fused[None, :] + d_stacked
    grads = AffGrads(dw1, db1, dw2, db2)
    return grads, d_inputs[0], d_inputs[1], d_inputs[2]
