"""Checkable formulas of the NC1 theory.

Feature characterisation at near-stationary points and its error bounds,
the NC1 bound, the singular-value lemma, the non-balancedness identity,
kernel positivity, the gradient-flow constants and the test-error bound
constants.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import Dataset, validate_assumptions
from .metrics import nc1, stationarity_residual
from .model import ActivationKind, LinearHead, ParticleCloud, activation_eval, features
from .structured_solver import feature_map_prediction, jacobi_eigh, op_norm, vec
from .training import HyperParams, empirical_loss

__all__ = [
    "AssumptionError",
    "TheoryReport",
    "Lemma32Report",
    "FlowConstants",
    "TestBoundConstants",
    "empirical_kernel",
    "e1_bound",
    "e2_bound",
    "theorem31_check",
    "nc1_bound",
    "lemma32_check",
    "lemma34_gap",
    "kernel_positivity",
    "kernel_positivity_jackknife",
    "flow_constants",
    "test_bound_constants",
    "rademacher_bound",
]


class AssumptionError(ValueError):
    """The dataset fails the boundedness / distinct-coordinate assumption."""


def empirical_kernel(cloud: ParticleCloud, X: np.ndarray, activation=ActivationKind.SIGMOID) -> np.ndarray:
    """K = (1/N) sum_j sigma(X^T u_j) sigma(u_j^T X), an n x n Gram matrix."""
    S = activation_eval(activation, cloud.U.T @ np.asarray(X, dtype=float))
    K = S.T @ S / cloud.N
    return 0.5 * (K + K.T)


@dataclass
class TheoryReport:
    """Residuals and bounds of the feature characterisation.

    ``E1_bound`` bounds ||E_1||_2 (a norm); ``E2_bound`` bounds ||E_2||_F^2
    (a squared norm).  ``slack`` is 1 for noise-free runs and 2 otherwise:
    the drift residual omits the score term, so noisy states are checked
    against ``slack * E1_bound``.
    """

    eps_S: float
    E1_bound: float
    E2_bound: Optional[float]
    res1_residual: float
    decomp_residual: Optional[float]
    nc1_bound: Optional[float]
    cond_holds: bool
    sigma_min_ok: bool
    balance_gap: float
    lambda_min_kernel: float
    nc1: Optional[float]
    slack: float
    gamma: float
    sigma_max_w: float
    sigma_min_w: float
    loss: float

    @property
    def res1_ok(self) -> bool:
        return self.res1_residual <= self.slack * self.E1_bound

    def as_dict(self) -> dict:
        return asdict(self)


def e1_bound(eps: float, lam: float, gamma: float, C1: float, smax: float, n: int) -> float:
    """sqrt(2 (lam^-4 g^4 C1^2 smax^4 + lam^-2) C1^2 n) eps."""
    return math.sqrt(2.0 * (lam**-4 * gamma**4 * C1**2 * smax**4 + lam**-2) * C1**2 * n) * eps


def e2_bound(e1: float, eps: float, loss: float, lam: float, gamma: float, C1: float, smax: float, smin: float,
             n: int) -> float:
    """E1^2 + (2 n g^-2 L_n + 2 lam^-2 smax^2 C1^2 n eps^2) / smin^2."""
    return e1**2 + (2.0 * n * loss / gamma**2 + 2.0 * lam**-2 * smax**2 * C1**2 * n * eps**2) / smin**2


def theorem31_check(cloud: ParticleCloud, head: LinearHead, ds: Dataset, hyper: HyperParams) -> TheoryReport:
    """Evaluate the untruncated feature characterisation at (cloud, head).

    res1_residual = || vec(H) - (g K/n kron W)(g^2 K/n kron W^T W + lam I)^{-1} vec(Y) ||
    E1_bound      = sqrt(2 (lam^-4 g^4 C1^2 smax^4 + lam^-2) C1^2 n) eps_S
    E2_bound      = E1_bound^2 + (2 n g^-2 L_n + 2 lam^-2 smax^2 C1^2 n eps_S^2) / smin^2
    decomp_residual = || H - g^-1 W (W^T W)^{-1} Y ||_F
    """
    h = dataclasses.replace(hyper, trunc=None)
    lam = h.lambda_rho
    if not lam > 0:
        raise ValueError("the characterisation needs lambda_rho > 0")
    g, n, C1 = head.gamma, ds.n, hyper.activation.C1
    eps = math.sqrt(stationarity_residual(cloud, head, ds, h))
    H = features(cloud, ds.X, hyper.activation)
    Kn = empirical_kernel(cloud, ds.X, hyper.activation) / n
    res1 = float(np.linalg.norm(vec(H) - feature_map_prediction(Kn, head, lam, ds.Y)))
    sv = np.linalg.svd(head.W, compute_uv=False)
    smax, smin = float(sv[0]), float(sv[-1])
    e1 = e1_bound(eps, lam, g, C1, smax, n)
    loss = empirical_loss(cloud, head, ds, hyper.activation)

    # condition number cap keeps (W^T W)^{-1} meaningful in double precision
    full_rank = smax > 0 and smin > 1e-7 * smax
    e2 = decomp = None
    if full_rank:
        e2 = e2_bound(e1, eps, loss, lam, g, C1, smax, smin, n)
        W = head.W
        target = W @ np.linalg.solve(W.T @ W, ds.Y) / g
        decomp = float(np.linalg.norm(H - target))

    nc = nc1(H, ds.Y).ratio
    kmin = float(jacobi_eigh(Kn * n)[0][0])
    report = TheoryReport(
        eps_S=eps,
        E1_bound=e1,
        E2_bound=e2,
        res1_residual=res1,
        decomp_residual=decomp,
        nc1_bound=None,
        cond_holds=False,
        sigma_min_ok=full_rank,
        balance_gap=lemma34_gap(cloud, head, hyper),
        lambda_min_kernel=kmin,
        nc1=nc,
        slack=1.0 if hyper.beta_inv == 0 else 2.0,
        gamma=g,
        sigma_max_w=smax,
        sigma_min_w=smin,
        loss=loss,
    )
    if e2 is not None:
        report.nc1_bound = nc1_bound(report, head, n, ds.q)
        report.cond_holds = report.nc1_bound is not None
    return report


def nc1_bound(report: TheoryReport, head: LinearHead, n: int, q: int) -> Optional[float]:
    """NC1 <= 16 g^2 E / ((1/(2 smax^2)) (q-1) n / q - 4 g^2 E), E = E2_bound,
    valid when g^2 E <= (1/(8 smax^2)) (q-1) n / q.  Returns None otherwise.

    The factor g^2 comes from evaluating NC1 on g H (NC1 is scale
    invariant); at g = 1 this is the familiar form.
    """
    if report.E2_bound is None:
        return None
    smax = float(np.linalg.svd(head.W, compute_uv=False)[0])
    E = head.gamma**2 * report.E2_bound
    base = (q - 1) * n / q / smax**2
    if E > base / 8.0:
        return None
    return 16.0 * E / (base / 2.0 - 4.0 * E)


@dataclass
class Lemma32Report:
    beta: float
    B: float
    threshold: float
    threshold_terms: tuple
    premise: bool
    gate_met: bool
    sigma_min: float
    sigma_min_floor: float
    frob_sq: float
    frob_cap: float
    sigma_min_holds: Optional[bool]
    frob_holds: Optional[bool]
    status: str

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def _xlogx_exp(a: float, b: float) -> float:
    """exp(a log b) with the convention 0 log 0 = 0."""
    if a == 0.0:
        return 1.0
    return math.exp(a * math.log(b))


def lemma32_check(
    head: LinearHead,
    L_reg: float,
    beta: float,
    alpha: float,
    eps0: float,
    B: Optional[float],
    lambda0_rho: float,
    lambda0_w: float,
    n: int,
    q: Optional[int] = None,
    C1: float = 1.0,
) -> Lemma32Report:
    """Singular-value conclusions under a small regularised loss.

    The beta threshold is max{ e^{(4a/e0) log(2a/e0)}, e^{4a log 2a},
    (2 C1^2 n B / lam0_rho)^{2/e0}, (4q/n)^{1/e0}, 64 (qB)^2 }.  When beta
    clears it and L_reg <= B beta^{-1} (log beta)^a, the report asserts
    sigma_min(W) >= beta^{-e0} and ||W||_F^2 <= 2 B (log beta)^a / lam0_W.

    ``B=None`` takes B = L_reg beta / (log beta)^a, the smallest constant
    for which the premise holds at this state.
    """
    if not 0 < eps0 <= 0.5:
        raise ValueError("eps0 must lie in (0, 1/2]")
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    q = head.q if q is None else q
    logb = math.log(beta) ** alpha
    if B is None:
        B = L_reg * beta / logb
    terms = (
        _xlogx_exp(4.0 * alpha / eps0, 2.0 * alpha / eps0),
        _xlogx_exp(4.0 * alpha, 2.0 * alpha),
        (2.0 * C1**2 * n * B / lambda0_rho) ** (2.0 / eps0),
        (4.0 * q / n) ** (1.0 / eps0),
        64.0 * (q * B) ** 2,
    )
    threshold = max(terms)
    premise = L_reg <= B / beta * logb * (1.0 + 1e-12)
    gate = beta >= threshold and premise
    sv = np.linalg.svd(head.W, compute_uv=False)
    smin = float(sv[-1])
    floor = beta ** (-eps0)
    frob = float(np.sum(head.W**2))
    cap = 2.0 * B / lambda0_w * logb
    if not gate:
        status = "premise threshold unmet, conclusions not asserted"
        s_ok = f_ok = None
    else:
        s_ok, f_ok = smin >= floor, frob <= cap
        status = "pass" if (s_ok and f_ok) else "fail"
    return Lemma32Report(beta, B, threshold, terms, premise, gate, smin, floor, frob, cap, s_ok, f_ok, status)


def lemma34_gap(cloud: ParticleCloud, head: LinearHead, hyper: HyperParams) -> float:
    """||lam_rho (1/N) A A^T - lam_W W W^T - beta^{-1} I_p||_op."""
    E = cloud.A @ cloud.A.T / cloud.N
    M = hyper.lambda_rho * E - hyper.lambda_w * (head.W @ head.W.T) - hyper.beta_inv * np.eye(cloud.p)
    return op_norm(M)


def _probe_features(ds: Dataset, activation, N_probe: int, seed: int, check: bool):
    if N_probe < 2:
        raise ValueError("N_probe must be at least 2")
    if check:
        rep = validate_assumptions(ds)
        if not rep.ok:
            raise AssumptionError(
                f"dataset fails the data assumptions (bounded={rep.bounded}, "
                f"distinct coordinate={rep.distinct_coordinate})"
            )
    U = np.random.default_rng(seed).standard_normal((ds.d, N_probe))
    return activation_eval(activation, U.T @ ds.X)  # N_probe x n


def kernel_positivity(
    ds: Dataset,
    activation=ActivationKind.SIGMOID,
    N_probe: int = 4096,
    seed: int = 0,
    check: bool = True,
) -> float:
    """Monte Carlo estimate of lambda_min(K(X, X)) under u ~ N(0, I_d).

    ``check=False`` skips the assumption gate, which is how degenerate
    datasets (repeated points) are probed.
    """
    S = _probe_features(ds, activation, N_probe, seed, check)
    return float(jacobi_eigh(S.T @ S / N_probe)[0][0])


def kernel_positivity_jackknife(
    ds: Dataset,
    activation=ActivationKind.SIGMOID,
    N_probe: int = 4096,
    seed: int = 0,
    groups: int = 16,
    check: bool = True,
):
    """Estimate and delete-one-group jackknife standard error."""
    S = _probe_features(ds, activation, N_probe, seed, check)
    full = float(jacobi_eigh(S.T @ S / N_probe)[0][0])
    parts = np.array_split(np.arange(N_probe), groups)
    total = S.T @ S
    loo = []
    for idx in parts:
        Sg = S[idx]
        loo.append(jacobi_eigh((total - Sg.T @ Sg) / (N_probe - len(idx)))[0][0])
    loo = np.array(loo)
    se = math.sqrt((groups - 1) / groups * np.sum((loo - loo.mean()) ** 2))
    return full, se


@dataclass(frozen=True)
class FlowConstants:
    A1: float
    A2: float
    B1: float
    B2: float
    B3: float
    B4: float
    C3: float
    C4: float
    C5: float
    R_W: float
    R_rho: float
    gamma_ok: bool
    t0: Optional[float]


def flow_constants(n, d, p, C1, lambda_star, gamma, *, q, beta=None) -> FlowConstants:
    """Constants of the joint gradient-flow convergence theorem (full
    statement list).  ``gamma_ok`` is gamma > C3; ``t0 = beta C5`` when
    ``beta`` is given."""
    if not lambda_star > 0:
        raise ValueError("lambda_star must be positive")
    R_W = 0.5
    R_rho = min(p + d, lambda_star**2 / (64.0 * n**2 * C1**2))
    A1 = lambda_star / (2.0 * n)
    A2 = 32.0 * math.sqrt(2.0 * n * (R_W + 1.0) * R_rho) * (2.0 * C1 * d * math.sqrt(p + d) + 1.0) / lambda_star
    lip = 4.0 * C1 * math.sqrt(d * (p + d)) + 2.0 * C1
    pre12 = 2.0 / n * math.sqrt(R_W + 1.0) * math.sqrt(p * n) * lip * 2.0 * math.sqrt(R_rho)
    B1 = pre12 / A1
    B2 = 2.0 * (R_W + 1.0) + pre12 * A2
    pre34 = (
        2.0 * p * math.sqrt(n) * math.sqrt(R_W + 1.0) * lip * 2.0 * math.sqrt(R_rho)
        * (4.0 * C1 * d**1.5 * math.sqrt(p + d) + 2.0 * C1 * d)
    )
    B3 = pre34 / A1
    B4 = pre34 * A2
    C3 = max(4.0 * B1 / R_W, 2.0 * math.sqrt(2.0) * B3 / math.sqrt(R_rho))
    C4 = (
        6.0 / gamma**2 * A1**2 * max(B2**2 / B1**2, B4**2 / B3**2)
        + 6.0 / gamma**2 * A2**2
        + 3.0 * q * (R_W + 1.0) / 2.0
        + 3.0 * R_rho
        + (p + d) / 2.0 * math.log(2.0 * math.pi)
        + 2.0 * (1.0 + (p + d) * math.log(8.0 * math.pi))
    )
    C5 = min(B1 / B2, B3 / B4) / gamma
    return FlowConstants(A1, A2, B1, B2, B3, B4, C3, C4, C5, R_W, R_rho, gamma > C3,
                         None if beta is None else beta * C5)


@dataclass(frozen=True)
class TestBoundConstants:
    C6: float
    C7: float
    C8: float
    C9: float
    C10: float
    C11: float


def test_bound_constants(d, p, C0, C1, M, tau, q, n, delta0, delta):
    """Constants C6..C11 of the test-error theorem and the bound

        C10 log(C11 n / delta0) sqrt(1/(2n)) + 6 q sqrt(log(2/delta) / n).

    C9 follows the theorem's full statement.
    """
    for name, v in dict(d=d, p=p, C0=C0, C1=C1, M=M, tau=tau, q=q, n=n, delta0=delta0, delta=delta).items():
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    D = p + d
    core = 1.0 + 2.0 * (q**2 * d + C0**2 * p) * C1 + M**2 / (2.0 * tau**2) + D / 4.0
    C6 = core
    C7 = C6 + D / 2.0 + math.log(2.0 * math.pi)
    C8 = 3.0 * core + D / 2.0 * math.log(2.0 * math.pi)
    C9 = (
        9.0 * (2.0 + 4.0 * (d + C0**2 * p) * C1 + M**2 / (2.0 * tau**2) + D / 4.0)
        + D / 2.0
        + 3.0 * D * math.log(2.0 * math.pi) / 2.0
        + 2.0 * (1.0 + D * math.log(8.0 * math.pi))
    )
    C10 = 50.0 * q * C9 * math.sqrt(C1**2 * math.pi)
    C11 = 640.0 * C1**2 * C9**2
    bound = C10 * math.log(C11 * n / delta0) * math.sqrt(1.0 / (2.0 * n)) + 6.0 * q * math.sqrt(math.log(2.0 / delta) / n)
    return TestBoundConstants(C6, C7, C8, C9, C10, C11), bound


def rademacher_bound(M_w, M_rho, C1, n) -> float:
    """sqrt(M_w M_rho C1^2 pi / (2n))."""
    if M_w < 0 or M_rho < 0 or not C1 > 0 or not n > 0:
        raise ValueError("rademacher_bound needs M_w, M_rho >= 0 and C1, n > 0")
    return math.sqrt(M_w * M_rho * C1**2 * math.pi / (2.0 * n))
