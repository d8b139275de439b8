"""Dense decompositions and the Kronecker-structured ridge solver.

Vectorisation is column-stacking throughout: for ``R`` of shape (q, n),
``vec(R) = R.reshape(-1, order="F")`` and ``(K kron G) vec(R) = vec(G R K^T)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import LinearHead

__all__ = [
    "SingularSystemError",
    "KronSystem",
    "jacobi_eigh",
    "psd_eigh",
    "svd",
    "op_norm",
    "vec",
    "unvec",
    "kron_solve",
    "kron_dense_solve",
    "apply_feature_operator",
    "feature_map_prediction",
    "eqfr_sides",
]

log = logging.getLogger(__name__)

PSD_TOL = 1e-10


class SingularSystemError(ArithmeticError):
    """The Kronecker system has a (numerically) zero eigenvalue."""


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (rows * cols,):
        raise ValueError(f"expected a vector of length {rows * cols}, got shape {v.shape}")
    return v.reshape(rows, cols, order="F")


def _round_robin(m: int):
    """Yield the m-1 rounds of a round-robin pairing of m (even) indices."""
    idx = list(range(m))
    for _ in range(m - 1):
        yield [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        idx = [idx[0], idx[-1]] + idx[1:-1]


def jacobi_eigh(M: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order;
    the pairs of one round are disjoint, so their rotations commute and are
    applied together.

    Returns
    -------
    w : ndarray, ascending eigenvalues
    V : ndarray, orthonormal eigenvectors as columns, ``M = V diag(w) V^T``
    """
    A = np.array(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    n = A.shape[0]
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V

    m = n + (n % 2)
    rounds = []
    for pairs in _round_robin(m):
        pairs = [(a, b) for a, b in pairs if a < n and b < n]
        P = np.array([min(a, b) for a, b in pairs])
        Q = np.array([max(a, b) for a, b in pairs])
        rounds.append((P, Q))

    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            P_, Q_, apq = P[active], Q[active], apq[active]
            theta = (A[Q_, Q_] - A[P_, P_]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J, rows then columns
            Ap, Aq = A[P_, :], A[Q_, :]
            A[P_, :] = c[:, None] * Ap - s[:, None] * Aq
            A[Q_, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, P_], A[:, Q_]
            A[:, P_] = Ap * c - Aq * s
            A[:, Q_] = Ap * s + Aq * c
            A[P_, Q_] = 0.0
            A[Q_, P_] = 0.0
            Vp, Vq = V[:, P_], V[:, Q_]
            V[:, P_] = Vp * c - Vq * s
            V[:, Q_] = Vp * s + Vq * c
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def psd_eigh(M: np.ndarray, name: str = "matrix"):
    """Jacobi eigendecomposition of a numerically PSD matrix.

    Eigenvalues in [-1e-10, 0) are clamped to zero with a logged warning;
    anything more negative is rejected.
    """
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        raise ValueError(f"{name} is not symmetric")
    w, V = jacobi_eigh(M)
    if w.size and w[0] < -PSD_TOL:
        raise ValueError(f"{name} is not PSD: smallest eigenvalue {w[0]:.3e}")
    neg = w < 0
    if np.any(neg):
        log.warning("clamping %d eigenvalue(s) of %s in [-1e-10, 0) to zero", int(neg.sum()), name)
        w = np.where(neg, 0.0, w)
    return w, V


def svd(M: np.ndarray):
    """Thin SVD with singular values in descending order (LAPACK)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.svd(M, full_matrices=False)


def op_norm(M: np.ndarray) -> float:
    """Spectral norm, the largest singular value."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(svd(M)[1][0])


@dataclass
class KronSystem:
    """The ridge system (K kron G + lam I) x = rhs.

    K is n x n (kernel / n), G is q x q (gamma^2 W^T W), rhs = vec(Y).
    """

    K: np.ndarray
    G: np.ndarray
    lam: float
    rhs: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        n, q = self.K.shape[0], self.G.shape[0]
        if self.K.shape != (n, n) or self.G.shape != (q, q):
            raise ValueError("K and G must be square")
        if self.rhs.shape != (n * q,):
            raise ValueError(f"rhs must have length n*q = {n * q}, got {self.rhs.shape[0]}")
        for name, M in (("K", self.K), ("G", self.G)):
            if np.max(np.abs(M - M.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(M), initial=0.0)):
                raise ValueError(f"{name} must be symmetric")

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def q(self) -> int:
        return self.G.shape[0]

    def dense(self) -> np.ndarray:
        return np.kron(self.K, self.G) + self.lam * np.eye(self.n * self.q)


def kron_solve(sys: KronSystem) -> np.ndarray:
    """Solve (K kron G + lam I) x = rhs through the eigenbases of K and G.

    With K = U_K diag(k) U_K^T and G = U_G diag(g) U_G^T the system is
    diagonal in the basis U_K kron U_G, so

        X = U_G [ (U_G^T R U_K) / (g_i k_j + lam) ] U_K^T,   R = unvec(rhs).

    Cost is O(n^3 + q^3 + n^2 q + n q^2); the nq x nq matrix is never formed.
    """
    kw, UK = psd_eigh(sys.K, "K")
    gw, UG = psd_eigh(sys.G, "G")
    denom = gw[:, None] * kw[None, :] + sys.lam
    scale = max(1.0, float(np.abs(gw).max(initial=0.0) * np.abs(kw).max(initial=0.0)))
    if np.any(np.abs(denom) <= 1e-14 * scale):
        raise SingularSystemError(f"Kronecker system is singular (lambda={sys.lam!r})")
    R = unvec(sys.rhs, sys.q, sys.n)
    Xt = (UG.T @ R @ UK) / denom
    return vec(UG @ Xt @ UK.T)


def kron_dense_solve(sys: KronSystem) -> np.ndarray:
    """Reference solve that materialises the Kronecker matrix."""
    return np.linalg.solve(sys.dense(), sys.rhs)


def apply_feature_operator(K: np.ndarray, head: LinearHead, sol: np.ndarray) -> np.ndarray:
    """Return (gamma K kron W) sol = vec(gamma W S K^T) with S = unvec(sol)."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValueError("K must be square")
    S = unvec(sol, head.q, n)
    return vec(head.gamma * (head.W @ S @ K.T))


def feature_map_prediction(Kn: np.ndarray, head: LinearHead, lam: float, Y: np.ndarray) -> np.ndarray:
    """vec of (gamma Kn kron W)(gamma^2 Kn kron W^T W + lam I)^{-1} vec(Y)."""
    G = head.gamma**2 * (head.W.T @ head.W)
    sol = kron_solve(KronSystem(Kn, G, lam, vec(Y)))
    return apply_feature_operator(Kn, head, sol)


def eqfr_sides(Kn: np.ndarray, head: LinearHead, lam: float, v: np.ndarray):
    """Both sides of the push-through identity, applied to ``v``.

    For full-rank W, with P = I_n kron W (W^T W)^{-1} and
    M = gamma^2 Kn kron W^T W,

        (gamma Kn kron W)(M + lam I)^{-1} = gamma^{-1} P - lam gamma^{-1} P (M + lam I)^{-1}.

    The left side goes through the structured solver and feature operator,
    the right side through a dense solve.
    """
    n = Kn.shape[0]
    W, g = head.W, head.gamma
    G = g**2 * (W.T @ W)
    lhs = apply_feature_operator(Kn, head, kron_solve(KronSystem(Kn, G, lam, v)))
    P = np.kron(np.eye(n), W @ np.linalg.inv(W.T @ W))
    M = np.kron(Kn, G) + lam * np.eye(n * head.q)
    rhs = (P @ v) / g - lam / g * (P @ np.linalg.solve(M, v))
    return lhs, rhs
