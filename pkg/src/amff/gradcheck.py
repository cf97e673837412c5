"""Finite-difference audit of every hand-derived gradient.

Runs small-dimensional probes of the fusion block (all parameter blocks
and all three inputs), both score heads, the three similarity kinds,
and both losses, reporting the worst relative error per block.
"""

from __future__ import annotations

import numpy as np

from .aff import AffParams, aff_backward, aff_forward, init_aff_params
from .losses import BatchScores, fidelity_loss, mse_loss
from .scoring import MlpParams, init_mlp_params, mlp_backward, mlp_forward, similarity_score
from .tensor import Array, finite_diff_check, make_rng

DEFAULT_EPS = 1e-5


def _check_aff(seed: int, dim: int = 12, hidden: int = 7) -> dict[str, float]:
    rng = make_rng((seed, 201))
    params = init_aff_params(dim, hidden, rng)
    f05, f10, f15 = (rng.standard_normal(dim) for _ in range(3))
    probe = rng.standard_normal(dim)

    _, cache = aff_forward(f05, f10, f15, params)
    grads, d05, d10, d15 = aff_backward(cache, params, probe)

    results = {}

    def loss_with(block: str, flat: Array) -> float:
        kw = {k: getattr(params, k) for k in ("w1", "b1", "w2", "b2")}
        kw[block] = flat.reshape(kw[block].shape)
        fused, _ = aff_forward(f05, f10, f15, AffParams(**kw))
        return float(probe @ fused)

    for block in ("w1", "b1", "w2", "b2"):
        analytic = getattr(grads, block).ravel()
        results[f"aff.{block}"] = finite_diff_check(
            lambda flat, b=block: loss_with(b, flat),
            getattr(params, block).ravel(),
            analytic,
            DEFAULT_EPS,
        )

    inputs = {"f05": (0, f05, d05), "f10": (1, f10, d10), "f15": (2, f15, d15)}
    for name, (slot, vec, analytic) in inputs.items():
        def loss_input(x, s=slot):
            trio = [f05, f10, f15]
            trio[s] = x
            fused, _ = aff_forward(*trio, params)
            return float(probe @ fused)

        results[f"aff.{name}"] = finite_diff_check(loss_input, vec, analytic, DEFAULT_EPS)
    return results


def _check_head(seed: int, tag: str, salt: int, dim: int = 12, hidden: int = 9) -> dict[str, float]:
    rng = make_rng((seed, salt))
    params = init_mlp_params(dim, hidden, rng)
    x = rng.standard_normal(dim)
    _, cache = mlp_forward(params, x)
    grads, dx = mlp_backward(cache, params, 1.0)

    results = {}

    def y_with(block: str, flat: Array) -> float:
        kw = {k: getattr(params, k) for k in ("w1", "b1", "w2", "b2")}
        kw[block] = flat.reshape(kw[block].shape)
        return mlp_forward(MlpParams(**kw), x)[0]

    for block in ("w1", "b1", "w2", "b2"):
        results[f"{tag}.{block}"] = finite_diff_check(
            lambda flat, b=block: y_with(b, flat),
            getattr(params, block).ravel(),
            getattr(grads, block).ravel(),
            DEFAULT_EPS,
        )
    results[f"{tag}.x"] = finite_diff_check(lambda v: mlp_forward(params, v)[0], x, dx, DEFAULT_EPS)
    return results


def _check_similarity(seed: int, dim: int = 12) -> dict[str, float]:
    rng = make_rng((seed, 204))
    results = {}
    for kind in ("cosine", "euclidean", "manhattan"):
        f_img = rng.standard_normal(dim)
        f_text = rng.standard_normal(dim)
        _, grad = similarity_score(f_img, f_text, kind)
        results[f"similarity.{kind}"] = finite_diff_check(
            lambda v, k=kind: similarity_score(v, f_text, k)[0], f_img, grad, DEFAULT_EPS
        )
    return results


def _check_losses(seed: int, n: int = 5) -> dict[str, float]:
    rng = make_rng((seed, 205))
    preds = rng.standard_normal(n)
    gts = rng.standard_normal(n)
    _, d_fid = fidelity_loss(BatchScores(preds, gts))
    _, d_mse = mse_loss(BatchScores(preds, gts))
    return {
        "loss.fidelity": finite_diff_check(
            lambda p: fidelity_loss(BatchScores(p, gts))[0], preds, d_fid, DEFAULT_EPS
        ),
        "loss.mse": finite_diff_check(
            lambda p: mse_loss(BatchScores(p, gts))[0], preds, d_mse, DEFAULT_EPS
        ),
    }


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error for every gradient block."""
    results: dict[str, float] = {}
    results.update(_check_aff(seed))
    results.update(_check_head(seed, "head_v", 202))
    results.update(_check_head(seed, "head_a", 203))
    results.update(_check_similarity(seed))
    results.update(_check_losses(seed))
    return results


def format_gradcheck(results: dict[str, float]) -> str:
    lines = [f"{'block':<22}{'max_rel_err':>14}"]
    for name, err in results.items():
        lines.append(f"{name:<22}{err:>14.3e}")
    worst = max(results.values())
    lines.append(f"{'worst':<22}{worst:>14.3e}")
    return "\n".join(lines) + "\n"
