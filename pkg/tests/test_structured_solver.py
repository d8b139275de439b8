import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapse_lab.model import LinearHead, selector_head
from collapse_lab.structured_solver import (
    KronSystem,
    SingularSystemError,
    apply_feature_operator,
    eqfr_sides,
    jacobi_eigh,
    kron_dense_solve,
    kron_solve,
    op_norm,
    psd_eigh,
    svd,
    unvec,
    vec,
)


def rand_psd(rng, n, rank=None):
    B = rng.standard_normal((n, rank or n))
    return B @ B.T / n


class TestJacobi:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10**6))
    def test_reconstruction(self, n, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((n, n))
        M = B + B.T
        w, V = jacobi_eigh(M)
        assert np.all(np.diff(w) >= 0)
        np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-12)
        np.testing.assert_allclose(V @ np.diag(w) @ V.T, M, atol=1e-11 * max(1, np.abs(M).max()))
        np.testing.assert_allclose(w, np.linalg.eigvalsh(M), atol=1e-11 * max(1, np.abs(M).max()))

    def test_diagonal_input(self):
        w, V = jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
        np.testing.assert_array_equal(w, [-1, 2, 3])

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ValueError):
            psd_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_psd_clamp(self, caplog):
        M = np.diag([1.0, -5e-11])
        w, _ = psd_eigh(M, "K")
        assert w[0] == 0.0
        assert "clamping" in caplog.text

    def test_psd_reject(self):
        with pytest.raises(ValueError):
            psd_eigh(np.diag([1.0, -1e-6]))


class TestSvd:
    def test_diag(self):
        _, s, _ = svd(np.diag([3.0, 1.0]))
        np.testing.assert_array_equal(s, [3, 1])
        assert op_norm(np.diag([3.0, 1.0])) == 3.0

    def test_gram_oracle(self):
        M = np.random.default_rng(0).standard_normal((5, 3))
        U, s, Vt = svd(M)
        np.testing.assert_allclose(s, np.sqrt(np.linalg.eigvalsh(M.T @ M))[::-1], atol=1e-10)
        assert np.linalg.norm(U @ np.diag(s) @ Vt - M) <= 1e-10 * np.linalg.norm(M)

    def test_zero(self):
        np.testing.assert_array_equal(svd(np.zeros((3, 2)))[1], 0)

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            svd(np.array([[np.inf]]))


class TestKronSolve:
    def test_scalar_system(self):
        Y = np.random.default_rng(0).standard_normal((3, 4))
        x = kron_solve(KronSystem(np.eye(4), np.eye(3), 1.0, vec(Y)))
        np.testing.assert_allclose(x, 0.5 * vec(Y), rtol=1e-15)

    def test_dense_oracle(self):
        rng = np.random.default_rng(1)
        sys = KronSystem(rand_psd(rng, 6), rand_psd(rng, 3), 0.1, rng.standard_normal(18))
        x, ref = kron_solve(sys), np.linalg.solve(sys.dense(), sys.rhs)
        assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_homogeneous(self):
        rng = np.random.default_rng(2)
        sys = KronSystem(rand_psd(rng, 4), rand_psd(rng, 2), 0.3, np.zeros(8))
        np.testing.assert_array_equal(kron_solve(sys), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 4), st.floats(1e-3, 10.0), st.integers(0, 10**6))
    def test_residual_and_dense(self, n, q, lam, seed):
        rng = np.random.default_rng(seed)
        sys = KronSystem(rand_psd(rng, n, rank=max(1, n - 2)), rand_psd(rng, q), lam, rng.standard_normal(n * q))
        x = kron_solve(sys)
        assert np.linalg.norm(sys.dense() @ x - sys.rhs) <= 1e-9 * np.linalg.norm(sys.rhs)
        ref = kron_dense_solve(sys)
        assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_singular(self):
        K = np.diag([1.0, 0.0])
        with pytest.raises(SingularSystemError):
            kron_solve(KronSystem(K, np.eye(2), 0.0, np.ones(4)))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            KronSystem(np.eye(2), np.eye(2), 1.0, np.ones(3))
        with pytest.raises(ValueError):
            KronSystem(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2), 1.0, np.ones(4))

    def test_vec_roundtrip(self):
        M = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(vec(M), [0, 3, 1, 4, 2, 5])
        np.testing.assert_array_equal(unvec(vec(M), 2, 3), M)


class TestFeatureOperator:
    def test_selector_embedding(self):
        sol = np.arange(6.0)  # n=3 blocks of q=2
        out = apply_feature_operator(np.eye(3), selector_head(4, 2), sol)
        np.testing.assert_array_equal(unvec(out, 4, 3), [[0, 2, 4], [1, 3, 5], [0, 0, 0], [0, 0, 0]])

    def test_dense_oracle(self):
        rng = np.random.default_rng(3)
        K, W = rand_psd(rng, 5), rng.standard_normal((4, 2))
        sol = rng.standard_normal(10)
        out = apply_feature_operator(K, LinearHead(W, 1.7), sol)
        np.testing.assert_allclose(out, np.kron(1.7 * K, W) @ sol, rtol=1e-12, atol=1e-13)

    def test_zero(self):
        rng = np.random.default_rng(4)
        out = apply_feature_operator(rand_psd(rng, 3), LinearHead(rng.standard_normal((3, 2))), np.zeros(6))
        np.testing.assert_array_equal(out, 0)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            apply_feature_operator(np.eye(3), selector_head(3, 2), np.zeros(5))

    @pytest.mark.parametrize("seed", range(20))
    def test_eqfr_identity(self, seed):
        rng = np.random.default_rng(seed)
        n, p, q = rng.integers(2, 7), rng.integers(3, 6), 2
        head = LinearHead(rng.standard_normal((p, q)), float(rng.uniform(0.5, 2.0)))
        Kn = rand_psd(rng, n)
        v = rng.standard_normal(n * q)
        lhs, rhs = eqfr_sides(Kn, head, float(rng.uniform(0.05, 1.0)), v)
        assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(lhs))
