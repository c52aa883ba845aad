import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdkv.cache_model import attention_probe
from rdkv.errors import NumericError, ShapeError
from rdkv.weights import (
    WeightVector,
    avg_pool_same,
    channel_weights,
    deviation_matrix,
    group_token_weights,
    logit_deviation_norm,
    raw_token_mass,
    spectral_norm,
    token_weights,
    tv_after_evict,
)


def _distribution(seed, n):
    return np.random.default_rng(seed).dirichlet(np.full(n, 0.5))


class TestTokenWeights:
    def test_identity_pooling_single_row(self):
        w = token_weights(np.array([[0.5, 0.3, 0.2]]), group=1, pool_kernel=1)
        np.testing.assert_array_equal(w.values, [0.5, 0.3, 0.2])
        assert w.kind == "token"

    def test_rows_are_summed(self):
        w = token_weights(np.array([[0.5, 0.5], [0.5, 0.5]]), 1, 1)
        np.testing.assert_array_equal(w.values, [1.0, 1.0])

    def test_pooling_zero_padding(self):
        np.testing.assert_allclose(avg_pool_same(np.array([0, 3, 0, 0, 0.0]), 3), [1, 1, 1, 0, 0])

    def test_pooling_kernel_five_edges(self):
        # position 0 sees x[0..2] and two padded zeros
        out = avg_pool_same(np.ones(6), 5)
        np.testing.assert_allclose(out, [3 / 5, 4 / 5, 1, 1, 4 / 5, 3 / 5])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            avg_pool_same(np.ones(4), 2)

    def test_group_heads_summed_not_averaged(self):
        rows = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        (w,) = group_token_weights(rows, group=2, pool_kernel=1)
        np.testing.assert_array_equal(w.values, [1.0, 1.0])

    def test_groups_split_consecutive_heads(self):
        rows = np.array([[[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0]]])
        a, b = group_token_weights(rows, group=2, pool_kernel=1)
        np.testing.assert_array_equal(a.values, [2.0, 0.0])
        np.testing.assert_array_equal(b.values, [0.0, 2.0])

    def test_group_must_divide_heads(self):
        with pytest.raises(ShapeError):
            group_token_weights(np.ones((3, 1, 2)) / 2, group=2)

    def test_token_weights_rejects_several_groups(self):
        with pytest.raises(ShapeError):
            token_weights(np.ones((4, 1, 2)) / 2, group=2)

    def test_mass_before_pooling_counts_rows(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((3, 6, 8))
        k = rng.standard_normal((20, 8))
        attn = np.stack([attention_probe(qi, k, np.arange(14, 20)).a for qi in q])
        assert abs(raw_token_mass(attn).sum() - 18) < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n_rows=st.integers(1, 6), perm_seed=st.integers(0, 1000))
    def test_invariant_under_row_permutation(self, seed, n_rows, perm_seed):
        rng = np.random.default_rng(seed)
        a = rng.dirichlet(np.ones(9), size=n_rows)
        perm = np.random.default_rng(perm_seed).permutation(n_rows)
        np.testing.assert_allclose(token_weights(a).values, token_weights(a[perm]).values, atol=1e-14)

    def test_weight_vector_validation(self):
        with pytest.raises(NumericError):
            WeightVector(np.array([1.0, -0.1]), "token")
        with pytest.raises(ValueError):
            WeightVector(np.array([1.0]), "row")


class TestTotalVariation:
    def test_three_token_row(self):
        assert tv_after_evict([0.5, 0.3, 0.2], 1) == pytest.approx(0.3, abs=1e-15)

    def test_zero_mass_token(self):
        assert tv_after_evict([0.0, 1.0, 0.0], 0) == 0.0

    def test_random_row_explicit_sum(self):
        a = _distribution(3, 10)
        for t in range(10):
            assert abs(tv_after_evict(a, t) - a[t]) < 1e-12

    def test_all_mass_on_evicted_token(self):
        with pytest.raises(NumericError):
            tv_after_evict([0.0, 1.0], 1)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 64), data=st.data())
    def test_equals_evicted_mass(self, seed, n, data):
        a = _distribution(seed, n)
        t = data.draw(st.integers(0, n - 1))
        if a[t] >= 1.0:
            return
        assert abs(tv_after_evict(a, t) - a[t]) < 1e-12


class TestChannelWeights:
    def test_norm_product(self):
        q = np.zeros((3, 4))
        k = np.zeros((2, 4))
        q[:, 1] = [3, 4, 0]
        k[:, 1] = [2, 0]
        w = channel_weights(q, k)
        assert w.values[1] == pytest.approx(5.0)
        assert w.values[0] == 0.0

    def test_zero_key_column(self):
        rng = np.random.default_rng(0)
        k = rng.standard_normal((5, 4))
        k[:, 2] = 0
        assert channel_weights(rng.standard_normal((3, 4)), k).values[2] == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            channel_weights(np.ones((2, 3)), np.ones((2, 4)))

    def test_grouped_queries_are_stacked(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((2, 5, 6))
        k = rng.standard_normal((9, 6))
        np.testing.assert_allclose(channel_weights(q, k).values,
                                   channel_weights(q.reshape(10, 6), k).values)

    def test_rank_one_singular_value(self):
        u = np.array([2.0, 0.0])
        v = np.array([0.0, 3.0, 0.0])
        assert spectral_norm(np.outer(u, v)) == pytest.approx(6.0, rel=1e-12)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 2))) == 0.0

    def test_non_convergence_raises(self):
        m = np.diag([1.0, 0.999999])
        with pytest.raises(NumericError):
            spectral_norm(m, tol=1e-16, max_iter=3)

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((8, 16))
        k = rng.standard_normal((32, 16))
        w = channel_weights(q, k).values
        for c in range(16):
            assert logit_deviation_norm(q, k, c) == pytest.approx(w[c], rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 12), T=st.integers(1, 40),
           d=st.integers(1, 16), data=st.data())
    def test_weight_is_norm_of_deviation(self, seed, rows, T, d, data):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal((rows, d))
        k = rng.standard_normal((T, d))
        c = data.draw(st.integers(0, d - 1))
        w = channel_weights(q, k).values[c]
        dz = deviation_matrix(q, k, c)
        sv = np.linalg.svd(dz, compute_uv=False)
        assert logit_deviation_norm(q, k, c) == pytest.approx(w, rel=1e-6)
        assert np.linalg.norm(dz, "fro") == pytest.approx(w, rel=1e-6)
        assert sv.sum() == pytest.approx(w, rel=1e-6)
        assert math.isclose(sv[0], w, rel_tol=1e-6)
