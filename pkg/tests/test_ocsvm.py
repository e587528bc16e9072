import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxoutlier.ocsvm import (
    DegenerateSpreadError,
    KernelConfig,
    decision,
    dual_objective,
    median_gamma,
    rbf,
    train_many,
    train_ocsvm,
)

from oracles import dense_qp, median_gamma_brute, offset_from_dual, oracle_decision, rbf_gram


def kkt_violations(m, X, tol=1e-6):
    """Return a list of human-readable KKT failures for a model trained on X."""
    n = len(X)
    C = 1.0 / (m.nu * n)
    full = np.zeros(n)
    # recover the full alpha vector by matching support vectors back to rows
    used = set()
    for sv, a in zip(m.support_vectors, m.alphas):
        for r in range(n):
            if r not in used and np.array_equal(X[r], sv):
                full[r] = a
                used.add(r)
                break
    scores = decision(m, X)
    bad = []
    if abs(full.sum() - 1.0) > 1e-9:
        bad.append("sum")
    if full.min() < -1e-12 or full.max() > C + 1e-12:
        bad.append("box")
    for a, s in zip(full, scores):
        if 1e-12 < a < C * (1 - 1e-9) and abs(s) > tol * (1 + abs(m.rho)):
            bad.append(f"free sv score {s}")
        if a <= 1e-12 and s < -tol:
            bad.append(f"zero alpha score {s}")
        if a >= C * (1 - 1e-9) and s > tol:
            bad.append(f"bounded score {s}")
    return bad


class TestKernel:
    def test_self_similarity(self):
        x = np.random.default_rng(0).normal(size=5)
        assert rbf(x, x, 3.7) == 1.0

    def test_analytic(self):
        assert rbf([0.0], [1.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-15)
        assert rbf([0.0], [1.0], 1.0) == pytest.approx(0.367879, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 7))
        assert rbf(x, y, 0.4) == rbf(y, x, 0.4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rbf([0, 1], [0], 1.0)

    def test_gamma_positive(self):
        with pytest.raises(ValueError):
            KernelConfig(0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gram_psd(self, seed):
        X = np.random.default_rng(seed).normal(size=(12, 3))
        assert np.linalg.eigvalsh(rbf_gram(X, 0.7)).min() >= -1e-9


class TestMedianGamma:
    def test_single_distance(self):
        assert median_gamma([0.0, 1.0]) == 0.5

    def test_odd_count(self):
        assert median_gamma([0.0, 1.0, 3.0]) == 0.125

    def test_even_count(self):
        # distances {1, 2, 3, 1, 2, 1}: sorted 1,1,1,2,2,3 -> median 1.5
        assert median_gamma([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1 / (2 * 1.5**2))

    def test_brute_force(self):
        X = np.random.default_rng(2).normal(size=(100, 32))
        assert abs(median_gamma(X) - median_gamma_brute(X)) <= 1e-12

    def test_scale(self):
        assert median_gamma([0.0, 2.0], scale=1.0) == 0.25

    def test_identical_points(self):
        with pytest.raises(DegenerateSpreadError):
            median_gamma(np.ones((4, 3)))

    def test_too_few(self):
        with pytest.raises(ValueError):
            median_gamma([[1.0, 2.0]])


class TestTrain:
    def test_single_point(self):
        x = np.array([[0.3, -1.2]])
        m = train_ocsvm(x, 1.0, KernelConfig(1.0))
        assert m.alphas.tolist() == [1.0]
        assert m.rho == 1.0
        assert decision(m, x[0]) == 0.0

    def test_duplicate_points(self):
        X = np.array([[1.0, 2.0], [1.0, 2.0]])
        m = train_ocsvm(X, 1.0, KernelConfig(0.5))
        assert m.alphas.sum() == pytest.approx(1.0, abs=1e-12)
        assert decision(m, X[0]) == pytest.approx(0.0, abs=1e-12)

    def test_far_probe(self):
        X = np.random.default_rng(3).normal(size=(6, 2))
        m = train_ocsvm(X, 0.5, KernelConfig(1.0))
        assert decision(m, np.array([1e3, 1e3])) == pytest.approx(-m.rho, abs=1e-15)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            train_ocsvm(np.array([[0.0], [np.nan]]), 0.5, KernelConfig(1.0))

    def test_bad_nu(self):
        with pytest.raises(ValueError):
            train_ocsvm(np.zeros((3, 1)), 0.0, KernelConfig(1.0))

    def test_dimension_mismatch(self):
        m = train_ocsvm(np.random.default_rng(0).normal(size=(4, 3)), 0.5, KernelConfig(1.0))
        with pytest.raises(ValueError):
            decision(m, np.zeros(2))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        Xs = rng.normal(size=(5, 8, 3))
        gammas = rng.uniform(0.1, 2.0, 5)
        batch = train_many(Xs, 0.3, gammas)
        for X, g, m in zip(Xs, gammas, batch):
            single = train_ocsvm(X, 0.3, KernelConfig(g))
            assert np.array_equal(single.alphas, m.alphas) and single.rho == m.rho

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_dense_qp(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        nu = [0.1, 0.5, 1.0][seed % 3]
        X = rng.normal(size=(n, 3))
        gamma = median_gamma(X)
        m = train_ocsvm(X, nu, KernelConfig(gamma))
        K = rbf_gram(X, gamma)
        a_ref, obj_ref = dense_qp(K, nu)
        rho_ref = offset_from_dual(a_ref, K, nu)
        assert abs(dual_objective(m) - obj_ref) <= 1e-6
        for probe in rng.normal(size=(100, 3)):
            assert abs(decision(m, probe) - oracle_decision(X, a_ref, rho_ref, gamma, probe)) <= 1e-6

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(2, 40), nu=st.sampled_from([0.03, 0.1, 0.5, 1.0]))
    def test_kkt(self, seed, n, nu):
        X = np.random.default_rng(seed).normal(size=(n, 4))
        m = train_ocsvm(X, nu, KernelConfig(median_gamma(X)))
        assert m.converged
        assert kkt_violations(m, X) == []

    @pytest.mark.parametrize("seed", range(3))
    def test_nu_property(self, seed):
        n, nu = 200, 0.1
        X = np.random.default_rng(seed).normal(size=(n, 8))
        m = train_ocsvm(X, nu, KernelConfig(median_gamma(X)))
        slack = 2 / math.sqrt(n)
        assert np.mean(decision(m, X) < 0) <= nu + slack
        assert len(m.alphas) / n >= nu - slack

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(30, 4))
        kern = KernelConfig(median_gamma(X))
        a = train_ocsvm(X, 0.2, kern, tol=1e-12)
        b = train_ocsvm(X[rng.permutation(30)], 0.2, kern, tol=1e-12)
        probes = rng.normal(size=(50, 4))
        assert np.max(np.abs(decision(a, probes) - decision(b, probes))) <= 1e-9

    def test_iteration_cap_flag(self):
        X = np.random.default_rng(0).normal(size=(50, 3))
        m = train_ocsvm(X, 0.1, KernelConfig(1.0), max_iter=1)
        assert not m.converged
        assert m.alphas.sum() == pytest.approx(1.0, abs=1e-9)
