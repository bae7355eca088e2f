import numpy as np
import pytest

from perturbcert import (
    frobenius_norm,
    low_rank_approx,
    pinv,
    pinv_truncated,
    spectral_norm,
    svd,
    vec_pnorm,
)
from perturbcert.linalg import as_matrix, effective_rank

from oracles import jacobi_svd, penrose_defects

N_PROPERTY_CASES = 500


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_matrix([[np.inf, 0.0]])
    with pytest.raises(ValueError):
        as_matrix([1.0, 2.0])  # 1-D


class TestSvd:
    def test_identity(self):
        d = svd(np.eye(2))
        np.testing.assert_allclose(d.sigma, [1.0, 1.0])
        np.testing.assert_allclose(np.abs(d.u), np.eye(2), atol=1e-14)
        np.testing.assert_allclose(np.abs(d.vt), np.eye(2), atol=1e-14)
        assert d.rank == 2

    def test_diagonal(self):
        d = svd(np.diag([2.0, 1.0]))
        np.testing.assert_allclose(d.sigma, [2.0, 1.0])

    def test_reconstruction_against_jacobi_oracle(self, rng):
        a = rng.standard_normal((3, 2))
        d = svd(a)
        np.testing.assert_allclose(d.reconstruct(), a, atol=1e-10)
        _, sigma_oracle, _ = jacobi_svd(a)
        np.testing.assert_allclose(d.sigma, sigma_oracle[: d.sigma.size], atol=1e-10)

    def test_orthonormality_and_ordering(self, rng):
        for _ in range(50):
            m, n = rng.integers(1, 8, size=2)
            a = rng.standard_normal((m, n))
            d = svd(a)
            k = min(m, n)
            np.testing.assert_allclose(d.u.T @ d.u, np.eye(k), atol=1e-10)
            np.testing.assert_allclose(d.vt @ d.vt.T, np.eye(k), atol=1e-10)
            assert np.all(np.diff(d.sigma) <= 1e-15)
            assert np.all(d.sigma >= 0)

    def test_sign_convention_deterministic(self, rng):
        a = rng.standard_normal((4, 3))
        d1 = svd(a)
        d2 = svd(a.copy())
        np.testing.assert_array_equal(d1.u, d2.u)
        np.testing.assert_array_equal(d1.vt, d2.vt)
        for j in range(d1.u.shape[1]):
            col = d1.u[:, j]
            nz = np.nonzero(col)[0]
            if nz.size:
                assert col[nz[0]] >= 0

    def test_zero_matrix_rank(self):
        d = svd(np.zeros((3, 2)))
        assert d.rank == 0

    def test_rank_counts_above_tolerance(self):
        a = np.diag([1.0, 1e-14])
        assert svd(a).rank == 1


class TestPinv:
    def test_identity(self):
        np.testing.assert_allclose(pinv(np.eye(3)), np.eye(3), atol=1e-12)

    def test_column_vector(self):
        np.testing.assert_allclose(pinv(np.array([[1.0], [0.0]])), [[1.0, 0.0]], atol=1e-14)

    def test_rank_one_closed_form(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        np.testing.assert_allclose(pinv(a), a / 25.0, atol=1e-12)

    def test_penrose_conditions(self, rng):
        for _ in range(50):
            m, n = rng.integers(1, 7, size=2)
            a = rng.standard_normal((m, n))
            if rng.random() < 0.3 and min(m, n) > 1:
                a[:, -1] = a[:, 0]  # make it rank-deficient sometimes
            defects = penrose_defects(a, pinv(a))
            assert max(defects) < 1e-9


class TestPinvTruncated:
    def test_full_rank_equals_inverse(self):
        r = pinv_truncated(np.diag([2.0, 1.0]), 2)
        np.testing.assert_allclose(r.matrix, np.diag([0.5, 1.0]), atol=1e-14)
        assert not r.truncated

    def test_drop_mode(self):
        r = pinv_truncated(np.diag([2.0, 1.0]), 1)
        np.testing.assert_allclose(r.matrix, np.diag([0.5, 0.0]), atol=1e-14)
        assert r.rank_used == 1

    def test_matches_pinv_of_best_rank_k(self, rng):
        a = rng.standard_normal((4, 3))
        k = 2
        r = pinv_truncated(a, k)
        u, s, vt = jacobi_svd(a)
        a_k = (u[:, :k] * s[:k]) @ vt[:k]
        oracle = np.linalg.pinv(a_k)
        np.testing.assert_allclose(r.matrix, oracle, atol=1e-9)

    def test_rank_deficient_input_flags_truncation(self):
        a = np.diag([1.0, 0.0])
        r = pinv_truncated(a, 2)
        assert r.truncated and r.rank_used == 1

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            pinv_truncated(np.eye(2), 0)


class TestLowRankApprox:
    def test_keep_dominant_mode(self):
        np.testing.assert_allclose(low_rank_approx(np.diag([3.0, 1.0]), 1),
                                   np.diag([3.0, 0.0]), atol=1e-14)

    def test_full_rank_identity_case(self, rng):
        a = rng.standard_normal((4, 4))
        np.testing.assert_allclose(low_rank_approx(a, 4), a, atol=1e-12)

    def test_tail_energy(self, rng):
        a = rng.standard_normal((5, 5))
        _, s, _ = jacobi_svd(a)
        approx = low_rank_approx(a, 3)
        tail = np.linalg.norm(a - approx, "fro") ** 2
        expected = s[3] ** 2 + s[4] ** 2
        assert abs(tail - expected) < 1e-9 * expected

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError):
            low_rank_approx(np.eye(2), 0)


class TestNorms:
    def test_frobenius(self):
        assert frobenius_norm([[3.0, 4.0]]) == pytest.approx(5.0)

    def test_spectral(self):
        assert spectral_norm(np.diag([2.0, 1.0])) == pytest.approx(2.0)

    def test_vec_pnorm(self):
        assert vec_pnorm([1.0, 1.0], 1.0) == pytest.approx(2.0)
        assert vec_pnorm([1.0, 1.0], 2.0) == pytest.approx(np.sqrt(2.0))

    def test_p_below_one_rejected(self):
        with pytest.raises(ValueError):
            vec_pnorm([1.0], 0.5)


class TestProperties:
    """Randomized invariants, >= 500 cases each."""

    def test_frobenius_equals_singular_energy(self):
        rng = np.random.default_rng(101)
        for _ in range(N_PROPERTY_CASES):
            m, n = rng.integers(1, 7, size=2)
            a = rng.standard_normal((m, n))
            d = svd(a)
            fro_sq = frobenius_norm(a) ** 2
            assert abs(fro_sq - np.sum(d.sigma**2)) <= 1e-9 * max(fro_sq, 1e-30)

    def test_pinv_involution(self):
        rng = np.random.default_rng(102)
        for _ in range(N_PROPERTY_CASES):
            m, n = rng.integers(1, 7, size=2)
            a = rng.standard_normal((m, n))
            back = pinv(pinv(a))
            assert np.max(np.abs(back - a)) < 1e-8

    def test_retained_and_tail_outputs_are_orthogonal(self):
        rng = np.random.default_rng(103)
        for _ in range(N_PROPERTY_CASES):
            m, n = rng.integers(2, 7, size=2)
            a = rng.standard_normal((m, n))
            k = int(rng.integers(1, min(m, n) + 1))
            z = rng.standard_normal(n)
            a_k = low_rank_approx(a, k)
            total = np.linalg.norm(a @ z) ** 2
            split = np.linalg.norm(a_k @ z) ** 2 + np.linalg.norm((a - a_k) @ z) ** 2
            assert abs(total - split) <= 1e-9 * max(total, 1e-30)

    def test_effective_rank_matches_jacobi(self):
        rng = np.random.default_rng(104)
        for _ in range(100):
            m, n = rng.integers(2, 6, size=2)
            r = int(rng.integers(1, min(m, n) + 1))
            a = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
            assert effective_rank(a) == r
