import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrf.core import ConfigurationError, CrfParams
from dcrf.kernels import KernelSet
from dcrf.meanfield import (MeanFieldConfig, combine_and_transform, init_marginals,
                            message_pass, mf_step, run_inference, softmax_rows,
                            variational_free_energy)
from dcrf.oracle import exact_inference

from conftest import loop_exact, rand_kernels, rand_params


def zero_kernels(n):
    z = np.zeros((n, n))
    return KernelSet.from_arrays(z, z, z)


class TestInitMarginals:
    def test_symmetric(self):
        np.testing.assert_array_equal(init_marginals([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_log_three(self):
        np.testing.assert_allclose(init_marginals([[math.log(3), 0.0]]), [[0.75, 0.25]],
                                   atol=1e-15)

    def test_no_overflow(self):
        q = init_marginals([[1000.0, 0.0]])
        assert np.all(np.isfinite(q))
        np.testing.assert_allclose(q, [[1.0, 0.0]], atol=1e-300)


class TestMessages:
    def test_zero_kernel(self, rng):
        out = message_pass(softmax_rows(rng.normal(size=(4, 2))), zero_kernels(4))
        for q in out:
            assert np.all(q == 0)

    def test_single_neighbour(self):
        s = np.array([[0.0, 0.3], [0.3, 0.0]])
        z = np.zeros((2, 2))
        Q = np.array([[0.2, 0.8], [0.6, 0.4]])
        qt, _, _ = message_pass(Q, KernelSet.from_arrays(s, z, z))
        np.testing.assert_allclose(qt[0], 0.3 * Q[1])

    def test_matches_loop(self, rng):
        n = 4
        k = rand_kernels(rng, n)
        Q = softmax_rows(rng.normal(size=(n, 2)))
        out = message_pass(Q, k)
        for c, km in enumerate(k):
            for i in range(n):
                for y in range(2):
                    ref = sum(km.values[i][j] * Q[j][y] for j in range(n) if j != i)
                    assert out[c][i, y] == pytest.approx(ref, abs=1e-14)

    def test_combine_identity_compat(self, rng):
        qt = [rng.normal(size=(3, 2)) for _ in range(3)]
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), [0.5, -1.0, 2.0], np.eye(2))
        np.testing.assert_allclose(combine_and_transform(qt, p),
                                   0.5 * qt[0] - qt[1] + 2.0 * qt[2])

    def test_combine_channel_selection(self, rng):
        qt = [rng.normal(size=(3, 2)) for _ in range(3)]
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), [1.0, 0.0, 0.0], np.eye(2))
        np.testing.assert_array_equal(combine_and_transform(qt, p), qt[0])

    def test_combine_permutation_compat_swaps(self, rng):
        qt = [rng.normal(size=(3, 2)) for _ in range(3)]
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), [1.0, 0.0, 0.0], [[0, 1], [1, 0]])
        np.testing.assert_array_equal(combine_and_transform(qt, p), qt[0][:, ::-1])

    def test_message_shape_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            message_pass(np.full((3, 2), 0.5), rand_kernels(rng, 4))


class TestStep:
    def test_decoupled_ignores_input(self, rng):
        U = rng.normal(size=(5, 2))
        p = rand_params(rng).replace(kernel_weights=np.zeros(3))
        Q_in = softmax_rows(rng.normal(size=(5, 2)))
        for mode in ("parallel", "sequential"):
            out = mf_step(Q_in, U, rand_kernels(rng, 5), p, MeanFieldConfig(mode=mode))
            np.testing.assert_array_equal(out, softmax_rows(U))

    def test_single_node_fixed_point(self, rng):
        U = rng.normal(size=(1, 2))
        out = mf_step(np.array([[0.9, 0.1]]), U, zero_kernels(1), rand_params(rng))
        np.testing.assert_allclose(out, softmax_rows(U), atol=1e-15)

    def test_two_node_hand_trace(self):
        # U = [[1, 0], [0, 2]], S_text[0,1] = 0.5, w = (1, 0, 0), mu = [[0, 1], [1, 0]];
        # expected values from a scalar trace of one update from softmax(U).
        U = np.array([[1.0, 0.0], [0.0, 2.0]])
        s = np.array([[0.0, 0.5], [0.5, 0.0]])
        z = np.zeros((2, 2))
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), [1.0, 0.0, 0.0], [[0, 1], [1, 0]])
        out = mf_step(softmax_rows(U), U, KernelSet.from_arrays(s, z, z), p)
        np.testing.assert_allclose(out, [[0.6500372439329319, 0.34996275606706806],
                                         [0.1456740229228174, 0.8543259770771826]], rtol=1e-12)

    def test_damping_blends(self, rng):
        n = 4
        U, k, p = rng.normal(size=(n, 2)), rand_kernels(rng, n), rand_params(rng)
        Q = softmax_rows(rng.normal(size=(n, 2)))
        full = mf_step(Q, U, k, p)
        damped = mf_step(Q, U, k, p, MeanFieldConfig(damping=0.25))
        np.testing.assert_allclose(damped, 0.75 * full + 0.25 * Q)

    def test_parallel_fixed_point_is_sequential_fixed_point(self, rng):
        n = 6
        U, k = rng.uniform(-1, 1, (n, 2)), rand_kernels(rng, n)
        p = rand_params(rng, coupling=0.1)
        Q, trace = run_inference(U, k, p, MeanFieldConfig(max_iters=500, convergence_tol=1e-15))
        assert trace.converged
        seq = mf_step(Q, U, k, p, MeanFieldConfig(mode="sequential"))
        np.testing.assert_allclose(seq, Q, atol=1e-13)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            MeanFieldConfig(max_iters=0)
        with pytest.raises(ConfigurationError):
            MeanFieldConfig(damping=1.0)
        with pytest.raises(ConfigurationError):
            MeanFieldConfig(mode="async")


class TestRunInference:
    def test_decoupled_converges_at_one(self, rng):
        U = rng.normal(size=(7, 2))
        p = rand_params(rng).replace(kernel_weights=np.zeros(3))
        Q, trace = run_inference(U, rand_kernels(rng, 7), p, MeanFieldConfig(max_iters=9))
        assert trace.iterations == 1 and trace.converged
        assert np.max(np.abs(Q - softmax_rows(U))) < 1e-12

    def test_weak_coupling_near_exact(self):
        r = np.random.default_rng(8)
        n = 8
        U, k = r.uniform(-1, 1, (n, 2)), rand_kernels(r, n)
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), r.uniform(-0.1, 0.1, 3),
                      r.uniform(0, 1, (2, 2)))
        Q, _ = run_inference(U, k, p, MeanFieldConfig(max_iters=20, convergence_tol=0))
        _, exact = loop_exact(U, k, p)
        assert np.max(np.abs(Q - exact)) < 0.05

    def test_sequential_free_energy_non_increasing(self):
        r = np.random.default_rng(21)
        n = 9
        U, k = r.uniform(-1, 1, (n, 2)), rand_kernels(r, n)
        p = CrfParams(np.zeros((2, 1)), np.zeros(2), r.uniform(-2, 2, 3), r.uniform(0, 1, (2, 2)))
        _, trace = run_inference(U, k, p, MeanFieldConfig(max_iters=15, mode="sequential",
                                                          convergence_tol=0,
                                                          record_trajectory=True))
        assert len(trace.free_energies) == trace.iterations + 1
        assert np.all(np.diff(trace.free_energies) <= 1e-10)

    def test_permutation_equivariance(self, rng):
        n = 6
        U, k, p = rng.normal(size=(n, 2)), rand_kernels(rng, n), rand_params(rng)
        perm = rng.permutation(n)
        kp = KernelSet.from_arrays(*(km.values[np.ix_(perm, perm)] for km in k))
        Q, _ = run_inference(U, k, p)
        Qp, _ = run_inference(U[perm], kp, p)
        np.testing.assert_allclose(Qp, Q[perm], atol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), coupling=st.floats(0, 5),
           mode=st.sampled_from(["parallel", "sequential"]))
    def test_rows_stochastic(self, seed, coupling, mode):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 8))
        U = r.uniform(-20, 20, (n, 2))
        Q, _ = run_inference(U, rand_kernels(r, n), rand_params(r, coupling=coupling),
                             MeanFieldConfig(mode=mode))
        assert np.all((Q >= 0) & (Q <= 1))
        np.testing.assert_allclose(Q.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic(self, rng):
        U, k, p = rng.normal(size=(5, 2)), rand_kernels(rng, 5), rand_params(rng)
        a, _ = run_inference(U, k, p)
        b, _ = run_inference(U, k, p)
        assert np.array_equal(a, b)


class TestFreeEnergy:
    def test_decoupled_equals_minus_logsumexp(self, rng):
        U = rng.normal(size=(4, 2))
        p = rand_params(rng).replace(kernel_weights=np.zeros(3))
        F = variational_free_energy(softmax_rows(U), U, rand_kernels(rng, 4), p)
        ref = -sum(math.log(math.exp(a) + math.exp(b)) for a, b in U)
        assert F == pytest.approx(ref, abs=1e-12)

    def test_single_node_uniform(self, rng):
        F = variational_free_energy([[0.5, 0.5]], [[0.0, 0.0]], zero_kernels(1), rand_params(rng))
        assert F == pytest.approx(-0.6931471805599453, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_gibbs_bound(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 9))
        U, k, p = r.uniform(-1, 1, (n, 2)), rand_kernels(r, n), rand_params(r, coupling=1.0)
        log_z, _ = loop_exact(U, k, p)
        for _ in range(5):
            Q = softmax_rows(r.normal(size=(n, 2)) * 3)
            assert variational_free_energy(Q, U, k, p) + log_z >= -1e-12

    def test_gibbs_equality_when_factorised(self, rng):
        U = rng.normal(size=(5, 2))
        p = rand_params(rng).replace(kernel_weights=np.zeros(3))
        k = rand_kernels(rng, 5)
        ex = exact_inference(U, k, p)
        assert variational_free_energy(ex.marginals, U, k, p) + ex.log_partition == pytest.approx(
            0.0, abs=1e-12)
