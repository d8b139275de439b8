"""NC1, balancedness, stationarity residual, entropy/KL estimates and the
mismatch test error."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .data import Dataset
from .model import ActivationKind, LinearHead, ParticleCloud, Truncation, features, predict
from .structured_solver import op_norm
from .training import HyperParams, gradients

__all__ = [
    "Nc1Breakdown",
    "BalanceReport",
    "nc1",
    "balancedness",
    "stationarity_residual",
    "entropy_knn",
    "kl_to_standard_gaussian",
    "head_drift",
    "test_error",
    "KNN_K",
]

KNN_K = 3
DIST_FLOOR = 1e-12


@dataclass(frozen=True)
class Nc1Breakdown:
    """Within-class and total centred variation; ``ratio`` is None when the
    total variation vanishes (all feature columns identical)."""

    within: float
    total: float
    ratio: Optional[float]

    @property
    def degenerate(self) -> bool:
        return self.ratio is None


def nc1(H: np.ndarray, Y: np.ndarray) -> Nc1Breakdown:
    """NC1 = Tr((H~ - M_c)^T (H~ - M_c)) / Tr(H~^T H~).

    H~ = H - M_g is the globally centred feature matrix and
    M_c = (1/m) H~ Y^T Y replaces every column by its class mean.
    """
    H = np.asarray(H, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if H.ndim != 2 or Y.ndim != 2 or H.shape[1] != Y.shape[1]:
        raise ValueError(f"H and Y must share the sample axis, got {H.shape} and {Y.shape}")
    counts = Y.sum(axis=1)
    if np.any(counts != counts[0]) or counts[0] == 0:
        raise ValueError("nc1 needs balanced, nonempty classes")
    m = counts[0]
    Ht = H - H.mean(axis=1, keepdims=True)
    Mc = (Ht @ Y.T) @ Y / m
    within = float(np.sum((Ht - Mc) ** 2))
    total = float(np.sum(Ht**2))
    # exact collapse leaves only round-off in the centred matrix
    if total <= (1e-14 * np.linalg.norm(H)) ** 2 or total == 0.0:
        return Nc1Breakdown(within, total, None)
    return Nc1Breakdown(within, total, within / total)


@dataclass(frozen=True)
class BalanceReport:
    c_star: float
    nb: float
    gap_op: float


def balancedness(cloud: ParticleCloud, head: LinearHead, hyper: HyperParams) -> BalanceReport:
    """Normalised distance of E[aa^T] from the best multiple of WW^T.

    c* = <E, WW^T>_F / ||WW^T||_F^2,  nb = ||E - c* WW^T||_op / ||E||_op,
    gap_op = ||lam_rho E - lam_W WW^T - beta^{-1} I||_op.
    """
    E = cloud.A @ cloud.A.T / cloud.N
    WW = head.W @ head.W.T
    ww2 = float(np.sum(WW * WW))
    if ww2 == 0.0:
        raise ValueError("c_star undefined: W W^T is zero")
    e_op = op_norm(E)
    if e_op == 0.0:
        raise ValueError("nb undefined: E[aa^T] is zero")
    c_star = float(np.sum(E * WW)) / ww2
    nb = op_norm(E - c_star * WW) / e_op
    gap = op_norm(hyper.lambda_rho * E - hyper.lambda_w * WW - hyper.beta_inv * np.eye(cloud.p))
    return BalanceReport(c_star, nb, gap)


def stationarity_residual(cloud, head, ds: Dataset, hyper: HyperParams, include_reg: bool = True) -> float:
    """eps_S^2 = (1/N) sum_j (||dA_j||^2 + ||dU_j||^2) from the drift.

    The score term beta^{-1} grad log rho is not observable from particles
    and is left out.  ``include_reg=False`` drops the lam_rho terms.
    """
    dA, dU, _ = gradients(cloud, head, ds, hyper, include_reg=include_reg)
    return float((np.sum(dA * dA) + np.sum(dU * dU)) / cloud.N)


def _log_unit_ball(D: int) -> float:
    return 0.5 * D * math.log(math.pi) - float(gammaln(0.5 * D + 1.0))


def entropy_knn(cloud, k: int = KNN_K) -> float:
    """Kozachenko-Leonenko entropy estimate of the particles in R^{p+d}.

    H = psi(N) - psi(k) + log V_D + (D/N) sum_j log eps_j, with eps_j the
    distance to the k-th neighbour (floored at 1e-12) and V_D the volume of
    the unit ball.  Accepts a ParticleCloud or a D x N array.
    """
    pts = cloud.theta if isinstance(cloud, ParticleCloud) else np.asarray(cloud, dtype=float)
    D, N = pts.shape
    if not 1 <= k < N:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={N}")
    dist, _ = cKDTree(pts.T).query(pts.T, k=k + 1)
    eps = np.maximum(dist[:, k], DIST_FLOOR)
    return float(digamma(N) - digamma(k) + _log_unit_ball(D) + D * np.mean(np.log(eps)))


def kl_to_standard_gaussian(cloud: ParticleCloud, entropy: Optional[float] = None) -> float:
    """KL(rho || N(0, I)) = -H(rho) + (D/2) log(2 pi) + (1/2) E||theta||^2.

    N(0, I) is the initial law, so this is the KL-to-initialisation
    diagnostic.
    """
    if entropy is None:
        entropy = entropy_knn(cloud)
    D = cloud.p + cloud.d
    return float(-entropy + 0.5 * D * math.log(2.0 * math.pi) + 0.5 * cloud.second_moment())


def head_drift(W: np.ndarray, W0: np.ndarray) -> float:
    """||W^T W - W0^T W0||_op."""
    return op_norm(W.T @ W - W0.T @ W0)


def test_error(
    head: LinearHead,
    cloud: ParticleCloud,
    ds_test: Dataset,
    activation: ActivationKind = ActivationKind.SIGMOID,
    trunc: Optional[Truncation] = None,
) -> float:
    """Class-averaged mismatch rate of the argmax prediction.

    Ties go to the lowest class index.
    """
    counts = ds_test.Y.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one test point")
    F = predict(head, features(cloud, ds_test.X, activation, trunc))
    wrong = np.argmax(F, axis=0) != ds_test.class_index
    per_class = np.bincount(ds_test.class_index, weights=wrong, minlength=ds_test.q) / counts
    return float(per_class.mean())
