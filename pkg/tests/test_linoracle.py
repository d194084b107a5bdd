import math

import numpy as np
import pytest

from udarts.linoracle import (LogisticInstance, ce_loss, darts_hessian, instance_batch,
                              jacobi_eigh, jensen_check, lambda_extremes, mudarts_hessian,
                              mudarts_valid_loss, numeric_hessian, sigma_cubic, sigma_d,
                              sigma_extrema, sigma_ud, sigma_ud_grid, variance_term,
                              verify_lemma1, verify_lemma3)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


class TestJacobi:
    @pytest.mark.parametrize("n", [1, 2, 3, 8, 20])
    def test_matches_lapack(self, n):
        rng = np.random.default_rng(n)
        a = rng.normal(size=(n, n))
        a = a + a.T
        w, v = jacobi_eigh(a)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(a), atol=1e-10)
        np.testing.assert_allclose(a @ v, v * w, atol=1e-9)
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-12)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_diagonal(self):
        w, _ = jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
        np.testing.assert_array_equal(w, [-1.0, 2.0, 3.0])


class TestDartsHessian:
    def test_single_point_at_zero(self):
        inst = LogisticInstance(np.array([[1.0, 0.0]]), np.array([1]), np.zeros(2))
        h = darts_hessian(inst)
        np.testing.assert_array_equal(h, [[0.25, 0.0], [0.0, 0.0]])
        assert lambda_extremes(h)[0] == 0.25

    def test_zero_alpha_structure(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(7, 3))
        inst = LogisticInstance(X, np.zeros(7, dtype=int), np.zeros(3))
        np.testing.assert_allclose(darts_hessian(inst), X.T @ X / 28, atol=1e-15)
        r = verify_lemma1(inst)
        assert abs(r["lambda_max"] - r["bound"]) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_numeric_hessian(self, seed):
        inst = instance_batch(seed, 1)[0]
        num = numeric_hessian(lambda a: ce_loss(inst, a), inst.alpha)
        np.testing.assert_allclose(darts_hessian(inst), num, atol=1e-5)

    def test_rank_one(self):
        u = np.array([0.6, 0.8])
        X = np.outer([1.0, -2.0, 0.5], u)
        inst = LogisticInstance(X, np.array([0, 1, 0]), np.array([0.3, -0.2]))
        r = verify_lemma1(inst)
        gram = float(np.sum(X ** 2))
        assert abs(r["bound"] - 0.25 / 3 * gram) < 1e-12
        assert r["bound_ok"] and r["convex_ok"]

    def test_alpha_norm_guard(self):
        with pytest.raises(ValueError):
            LogisticInstance(np.ones((2, 2)), np.array([0, 1]), np.array([0.8, 0.8]))


class TestCrossEntropyHessianBound:
    def test_hundred_instances(self):
        rows = [verify_lemma1(i) for i in instance_batch(0, 100)]
        assert all(r["bound_ok"] and r["convex_ok"] and r["symmetric"] for r in rows)

    def test_rayleigh_quotients(self):
        inst = instance_batch(3, 1, d_max=8)[0]
        h = darts_hessian(inst)
        lmax = lambda_extremes(h)[0]
        z = np.random.default_rng(1).normal(size=(1000, h.shape[0]))
        rq = np.einsum("ij,jk,ik->i", z, h, z) / np.einsum("ij,ij->i", z, z)
        assert np.all(rq <= lmax + 1e-9)


class TestMudartsLoss:
    def test_zero_alpha_variance(self):
        inst = LogisticInstance(np.random.default_rng(0).normal(size=(5, 2)),
                                np.array([0, 1, 1, 0, 1]), np.zeros(2))
        assert variance_term(inst) == 0.25

    def test_single_point(self):
        x, a = np.array([0.4, -1.1]), np.array([0.5, 0.3])
        inst = LogisticInstance(x[None], np.array([1]), a)
        xt = float(x @ a)
        expected_var = sig(xt * xt) - sig(xt) ** 2
        expected_ce = -math.log(sig(xt))
        assert abs(mudarts_valid_loss(inst) - (expected_ce + expected_var)) < 1e-14

    def test_scalar_instance(self):
        # d = 1, N = 1: every quantity by hand
        inst = LogisticInstance(np.array([[2.0]]), np.array([0]), np.array([0.25]))
        t = 0.5
        s, q = sig(t), sig(t * t)
        assert abs(darts_hessian(inst)[0, 0] - 4 * s * (1 - s)) < 1e-15
        # second derivative of -log(1 - s(2a)) + s((2a)^2) - s(2a)^2 w.r.t. a
        ce2 = 4 * s * (1 - s)
        var2 = (8 * q * (1 - q) + 4 * t * t * 4 * q * (1 - q) * (1 - 2 * q)
                - 8 * (s * (1 - s)) ** 2 - 8 * s * s * (1 - s) * (1 - 2 * s))
        num = mudarts_hessian(inst)[0, 0]
        assert abs(num - (ce2 + var2)) < 1e-6


class TestSigmaPolynomials:
    def test_extrema(self):
        ext = sigma_extrema()
        assert abs(ext["sigma_d"]["max"] - 0.25) < 1e-9
        assert abs(ext["sigma_d"]["argmax"] - 0.5) < 1e-9
        assert abs(ext["sigma_cubic"]["max"] - 0.0962) < 1e-4
        assert abs(ext["sigma_cubic"]["argmax"] - (3 - math.sqrt(3)) / 6) < 1e-6

    def test_bounds_on_grid(self):
        p = np.linspace(0, 1, 100_001)
        assert np.all(sigma_d(p) <= 0.25)
        assert np.all(sigma_cubic(p) <= 0.0962 + 1e-4)

    @pytest.mark.parametrize("a2", [0.0, 0.3, 0.99])
    def test_sigma_ud_at_zero(self, a2):
        assert sigma_ud(0.0, a2) == 0.0

    def test_sigma_ud_at_one(self):
        assert sigma_ud(1.0, 0.0) == -2.0

    def test_sigma_ud_nonpositive(self):
        assert sigma_ud_grid("final")["nonpositive"]

    def test_draft_variant_maximum(self):
        # the earlier form is linear in a2 at fixed q, 0.310634 a2 - 0.15388 near q = 0.1132,
        # and that point is the grid maximum at the top of the a2 range
        for a2 in (0.2, 0.6, 0.9):
            assert abs(sigma_ud(0.1132, a2, variant="draft") - (0.310634 * a2 - 0.15388)) < 1e-4
        g = sigma_ud_grid("draft", a2_values=[0.999])
        assert abs(g["q"] - 0.1132) < 2e-3
        assert abs(g["max"] - (0.310634 * 0.999 - 0.15388)) < 1e-4

    def test_domain(self):
        with pytest.raises(ValueError):
            sigma_ud(1.5, 0.1)
        with pytest.raises(ValueError):
            sigma_ud(0.5, 0.1, variant="other")


class TestCensus:
    def test_jensen(self):
        r = jensen_check(2000, seed=3)
        assert r["passed"] == r["samples"]

    def test_eigen_census_report_shape(self):
        rep = verify_lemma3(instance_batch(7, 5, alpha_norm_max=0.9))
        assert rep["count"] == 5 and len(rep["instances"]) == 5
        assert 0.0 <= rep["eigen_pass_rate"] <= 1.0
        assert all(np.isfinite(r["lambda_mudarts"]) for r in rep["instances"])

    def test_zero_alpha_instance(self):
        inst = LogisticInstance(np.random.default_rng(0).normal(size=(6, 3)),
                                np.array([0, 1, 0, 1, 1, 0]), np.zeros(3))
        row = verify_lemma3([inst])["instances"][0]
        assert np.isfinite(row["lambda_darts"]) and np.isfinite(row["lambda_mudarts"])
