import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrf.core import ConfigurationError
from dcrf.kernels import (KernelMatrix, KernelSet, build_kernel_set, gaussian_text_kernel,
                          jaccard_distance, jaccard_kernel, sparsify_topk)

tokens = st.frozensets(st.sampled_from("abcdefgh"), max_size=6)


def assert_kernel_invariants(s):
    assert np.array_equal(s, s.T)
    assert np.all(np.diagonal(s) == 0)
    assert s.min() >= 0 and s.max() <= 1


class TestGaussianTextKernel:
    def test_identical_points(self):
        s = gaussian_text_kernel([[1.0, 2.0], [1.0, 2.0]], 0.7).values
        assert s[0, 1] == 1.0 and s[0, 0] == 0.0

    def test_distance_equal_two_theta(self):
        theta = 0.8
        # |x_i - x_j|^2 = 1.6 = 2 theta
        x = [[0.0, 0.0], [math.sqrt(1.6), 0.0]]
        assert gaussian_text_kernel(x, theta).values[0, 1] == pytest.approx(0.36787944117144233,
                                                                            rel=1e-12)

    def test_matches_pairwise_loop(self, rng):
        x = rng.normal(size=(7, 5))
        s = gaussian_text_kernel(x, 2.5).values
        for i in range(7):
            for j in range(7):
                if i != j:
                    d2 = sum((x[i][k] - x[j][k]) ** 2 for k in range(5))
                    assert s[i, j] == pytest.approx(math.exp(-d2 / 5.0), rel=1e-10)
        assert_kernel_invariants(s)

    def test_128_dim_embeddings(self, rng):
        s = gaussian_text_kernel(rng.normal(size=(20, 128)), 64.0).values
        assert s.shape == (20, 20)
        assert_kernel_invariants(s)
        off = s[~np.eye(20, dtype=bool)]
        assert np.all(off > 0)

    @pytest.mark.parametrize("theta", [0.0, -1.0])
    def test_bad_theta(self, theta):
        with pytest.raises(ConfigurationError):
            gaussian_text_kernel([[0.0], [1.0]], theta)

    def test_monotone_in_theta(self, rng):
        x = rng.normal(size=(5, 3))
        a = gaussian_text_kernel(x, 1.0).values
        b = gaussian_text_kernel(x, 2.0).values
        off = ~np.eye(5, dtype=bool)
        assert np.all(b[off] > a[off])

    def test_tiled_threads_identical(self, rng, monkeypatch):
        import dcrf.kernels as K
        monkeypatch.setattr(K, "_TILE", 16)
        x = rng.normal(size=(50, 4))
        one = gaussian_text_kernel(x, 1.0, n_threads=1).values
        many = gaussian_text_kernel(x, 1.0, n_threads=4).values
        assert np.array_equal(one, many)
        assert_kernel_invariants(one)


class TestJaccard:
    def test_identical(self):
        assert jaccard_distance({"g1", "g2"}, {"g1", "g2"}) == 0.0

    def test_partial_overlap(self):
        assert jaccard_distance({"a", "b"}, {"b", "c"}) == pytest.approx(2 / 3)

    def test_both_empty(self):
        assert jaccard_distance(set(), set()) == 1.0

    @given(tokens, tokens)
    def test_symmetric_and_bounded(self, a, b):
        d = jaccard_distance(a, b)
        assert d == jaccard_distance(b, a)
        assert 0.0 <= d <= 1.0
        if a:
            assert jaccard_distance(a, a) == 0.0

    def test_kernel_identical_sets(self):
        s = jaccard_kernel([{"x"}, {"x"}], 0.3, "set").values
        assert s[0, 1] == 1.0

    def test_kernel_disjoint_sets(self):
        s = jaccard_kernel([{"x"}, {"y"}], 0.5, "group").values
        assert s[0, 1] == pytest.approx(0.36787944117144233, rel=1e-12)

    def test_kernel_matches_loop(self):
        sets = [{"a", "b"}, {"b", "c"}, {"c"}]
        theta = 0.4
        s = jaccard_kernel(sets, theta, "set").values
        for i in range(3):
            for j in range(3):
                want = 0.0 if i == j else math.exp(-jaccard_distance(sets[i], sets[j]) ** 2
                                                   / (2 * theta))
                assert s[i, j] == pytest.approx(want, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(tokens, min_size=1, max_size=12), st.floats(0.01, 10))
    def test_kernel_matches_scalar_distance(self, sets, theta):
        s = jaccard_kernel(sets, theta, "group").values
        assert_kernel_invariants(s)
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                d = jaccard_distance(sets[i], sets[j])
                assert s[i, j] == pytest.approx(math.exp(-d * d / (2 * theta)), rel=1e-12)

    def test_bad_tag(self):
        with pytest.raises(ConfigurationError):
            jaccard_kernel([{"a"}, {"b"}], 1.0, "text")


def sort_mask_oracle(s, k):
    n = len(s)
    kept = np.zeros_like(s)
    for i in range(n):
        cand = sorted(((s[i][j], -j) for j in range(n) if j != i), reverse=True)[:k]
        for _, negj in cand:
            kept[i][-negj] = s[i][-negj]
    return np.maximum(kept, kept.T)


class TestSparsify:
    def test_keep_all(self, rng):
        n = 5
        km = gaussian_text_kernel(rng.normal(size=(n, 2)), 1.0)
        assert np.array_equal(sparsify_topk(km, n - 1).values, km.values)

    def test_single_survivor_row(self):
        s = np.array([[0.0, 0.9, 0.1], [0.9, 0.0, 0.5], [0.1, 0.5, 0.0]])
        out = sparsify_topk(KernelMatrix(s, "set", 1.0), 1).values
        np.testing.assert_array_equal(out[0], [0.0, 0.9, 0.0])

    def test_against_sort_oracle(self, rng):
        s = np.triu(rng.uniform(size=(6, 6)), 1)
        s = s + s.T
        out = sparsify_topk(KernelMatrix(s, "group", 1.0), 2).values
        np.testing.assert_array_equal(out, sort_mask_oracle(s, 2))
        assert_kernel_invariants(out)
        assert np.all((out > 0).sum(axis=1) <= 4)

    @pytest.mark.parametrize("k", [0, 6])
    def test_k_range(self, rng, k):
        km = gaussian_text_kernel(rng.normal(size=(6, 2)), 1.0)
        with pytest.raises(ConfigurationError):
            sparsify_topk(km, k)


class TestKernelContainers:
    def test_rejects_asymmetric(self):
        with pytest.raises(ConfigurationError, match="symmetric"):
            KernelMatrix(np.array([[0.0, 0.2], [0.3, 0.0]]), "text", 1.0)

    def test_rejects_nonzero_diagonal(self):
        with pytest.raises(ConfigurationError, match="diagonal"):
            KernelMatrix(np.array([[1.0, 0.2], [0.2, 0.0]]), "text", 1.0)

    def test_set_requires_shared_n(self):
        with pytest.raises(ConfigurationError):
            KernelSet.from_arrays(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((2, 2)))

    def test_channel_order_enforced(self):
        z = np.zeros((2, 2))
        with pytest.raises(ConfigurationError):
            KernelSet(KernelMatrix(z, "set", 1), KernelMatrix(z, "set", 1),
                      KernelMatrix(z, "group", 1))

    def test_build_kernel_set(self, rng):
        ks = build_kernel_set(rng.normal(size=(4, 3)), [{"a"}, {"a"}, set(), {"b"}],
                              [{"g"}, set(), set(), {"g"}], (1.0, 0.5, 0.5))
        assert ks.thetas == (1.0, 0.5, 0.5)
        for km in ks:
            assert_kernel_invariants(km.values)
        # empty vs empty sets are at distance 1, not 0
        assert ks.group.values[1, 2] == pytest.approx(math.exp(-1.0))
