import numpy as np
import pytest

from amff.aff import AffParams, aff_backward, aff_forward, init_aff_params
from amff.errors import ShapeError
from amff.tensor import finite_diff_check, make_rng


def _params(dim=10, hidden=6, seed=0):
    return init_aff_params(dim, hidden, make_rng((seed, 77)))


def _random_params(dim, hidden, rng):
    # nonzero biases so the weights generator is exercised off-center
    p = init_aff_params(dim, hidden, rng)
    p.b1[:] = 0.1 * rng.standard_normal(hidden)
    p.b2[:] = 0.1 * rng.standard_normal(dim)
    return p


def _loop_oracle(f05, f10, f15, p):
    """Straightforward re-implementation with explicit loops."""
    dim, hidden = p.dim, p.hidden
    rows = [f05, f10, f15]
    logits = np.zeros((3, dim))
    for r in range(3):
        act = np.zeros(hidden)
        for i in range(hidden):
            act[i] = max(sum(p.w1[i, j] * rows[r][j] for j in range(dim)) + p.b1[i], 0.0)
        for c in range(dim):
            logits[r, c] = sum(p.w2[c, i] * act[i] for i in range(hidden)) + p.b2[c]
    fused = np.zeros(dim)
    for c in range(dim):
        col = logits[:, c]
        e = np.exp(col - col.max())
        w = e / e.sum()
        fused[c] = w[0] * f05[c] + w[1] * f10[c] + w[2] * f15[c]
    return fused


class TestAffForward:
    def test_equal_inputs_reproduce_input(self):
        rng = make_rng(1)
        p = _random_params(12, 8, rng)
        f = rng.standard_normal(12)
        fused, cache = aff_forward(f, f, f, p)
        assert np.max(np.abs(fused - f)) <= 1e-12
        # equal rows give exactly equal logits, hence exact 1/3 weights
        assert np.all(cache.weights == 1.0 / 3.0)

    def test_convex_combination_bounds(self):
        rng = make_rng(2)
        p = _random_params(16, 8, rng)
        for _ in range(50):
            f05, f10, f15 = (rng.standard_normal(16) for _ in range(3))
            fused, _ = aff_forward(f05, f10, f15, p)
            stacked = np.stack([f05, f10, f15])
            assert np.all(fused >= stacked.min(axis=0) - 1e-12)
            assert np.all(fused <= stacked.max(axis=0) + 1e-12)

    def test_simplex_invariant(self):
        rng = make_rng(3)
        p = _random_params(8, 5, rng)
        for _ in range(100):
            fused, cache = aff_forward(*(rng.standard_normal(8) * 3 for _ in range(3)), p)
            w = cache.weights
            assert np.all(w >= 0)
            assert np.max(np.abs(w.sum(axis=0) - 1.0)) <= 1e-12

    def test_matches_loop_oracle(self):
        rng = make_rng(4)
        p = _random_params(7, 5, rng)
        f05, f10, f15 = (rng.standard_normal(7) for _ in range(3))
        fused, _ = aff_forward(f05, f10, f15, p)
        assert np.allclose(fused, _loop_oracle(f05, f10, f15, p), atol=1e-12)

    def test_permutation_covariance(self):
        rng = make_rng(5)
        p = _random_params(9, 6, rng)
        a, b, c = (rng.standard_normal(9) for _ in range(3))
        fused, cache = aff_forward(a, b, c, p)
        fused_p, cache_p = aff_forward(c, a, b, p)
        # fused output is invariant, weights permute with their rows
        assert np.max(np.abs(fused - fused_p)) < 1e-12
        assert np.allclose(cache.weights[0], cache_p.weights[1], atol=1e-12)
        assert np.allclose(cache.weights[2], cache_p.weights[0], atol=1e-12)

    def test_dim_mismatch(self):
        p = _params(dim=6)
        with pytest.raises(ShapeError):
            aff_forward(np.zeros(6), np.zeros(6), np.zeros(5), p)
        with pytest.raises(ShapeError):
            aff_forward(np.zeros(4), np.zeros(4), np.zeros(4), p)


class TestAffBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = make_rng(6)
        p = _random_params(8, 5, rng)
        _, cache = aff_forward(*(rng.standard_normal(8) for _ in range(3)), p)
        grads, d05, d10, d15 = aff_backward(cache, p, np.zeros(8))
        for g in (grads.w1, grads.b1, grads.w2, grads.b2, d05, d10, d15):
            assert np.array_equal(g, np.zeros_like(g))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_blocks_match_finite_differences(self, seed):
        rng = make_rng((seed, 88))
        dim, hidden = 9, 6
        p = _random_params(dim, hidden, rng)
        f05, f10, f15 = (rng.standard_normal(dim) for _ in range(3))
        probe = rng.standard_normal(dim)
        _, cache = aff_forward(f05, f10, f15, p)
        grads, d05, d10, d15 = aff_backward(cache, p, probe)

        def loss_with(block, flat):
            kw = {k: getattr(p, k) for k in ("w1", "b1", "w2", "b2")}
            kw[block] = flat.reshape(kw[block].shape)
            fused, _ = aff_forward(f05, f10, f15, AffParams(**kw))
            return float(probe @ fused)

        for block in ("w1", "b1", "w2", "b2"):
            err = finite_diff_check(
                lambda flat, b=block: loss_with(b, flat),
                getattr(p, block).ravel(),
                getattr(grads, block).ravel(),
            )
            assert err < 1e-4, f"{block}: {err}"

        for slot, analytic in ((0, d05), (1, d10), (2, d15)):
            def loss_input(x, s=slot):
                trio = [f05, f10, f15]
                trio[s] = x
                fused, _ = aff_forward(*trio, p)
                return float(probe @ fused)

            err = finite_diff_check(loss_input, (f05, f10, f15)[slot], analytic)
            assert err < 1e-4, f"input {slot}: {err}"

    def test_identical_inputs_grads_match_finite_differences(self):
        rng = make_rng(7)
        p = _random_params(8, 5, rng)
        f = rng.standard_normal(8)
        probe = rng.standard_normal(8)
        _, cache = aff_forward(f, f, f, p)
        _, d05, d10, d15 = aff_backward(cache, p, probe)

        for slot, analytic in ((0, d05), (1, d10), (2, d15)):
            def loss_input(x, s=slot):
                trio = [f, f, f]
                trio[s] = x
                fused, _ = aff_forward(*trio, p)
                return float(probe @ fused)

            err = finite_diff_check(loss_input, f, analytic)
            assert err < 1e-4

    def test_cache_params_mismatch(self):
        rng = make_rng(8)
        p = _random_params(8, 5, rng)
        _, cache = aff_forward(*(rng.standard_normal(8) for _ in range(3)), p)
        other = _params(dim=10, hidden=5, seed=9)
        with pytest.raises(ShapeError):
            aff_backward(cache, other, np.zeros(10))


def test_init_weights_unsaturated():
    rng = make_rng(10)
    p = init_aff_params(32, 16, rng)
    f05, f10, f15 = (rng.standard_normal(32) for _ in range(3))
    _, cache = aff_forward(f05, f10, f15, p)
    # zero biases and Glorot weights: no scale dominates or vanishes at init
    assert np.all(cache.weights > 0.01) and np.all(cache.weights < 0.95)
    assert abs(cache.weights.mean() - 1.0 / 3.0) < 0.05
