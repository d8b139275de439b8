"""Losses, closed-form drift and the noisy particle dynamics.

Particle drift (per particle, i.e. the gradient of the first variation):

    dA_j = J(a_j) (gamma/n) W r sigma(X^T u_j) + lam_rho a_j
    dU_j = (gamma/n) X diag(sigma'(X^T u_j)) r^T W^T tau(a_j) + lam_rho u_j
    dW   = (gamma/n) H r^T + lam_W W,           r = gamma W^T H - Y

with tau the truncation (identity when absent) and J its diagonal
Jacobian.  For the finite cloud, dA_j and dU_j equal N times the partial
derivative of the regularised loss with respect to a_j and u_j.

Gaussian noise is drawn from a counter-based Philox stream keyed by the run
seed with the step index in the counter, so a state can be advanced from
any checkpoint and the draw never depends on evaluation order.  Column j of
each draw is particle j's increment.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import Dataset
from .model import (
    FEATURE_BLOCK,
    ActivationKind,
    LinearHead,
    ParticleCloud,
    Truncation,
    selector_head,
    truncate_eval,
)

__all__ = [
    "HyperParams",
    "TrainState",
    "Record",
    "Trajectory",
    "DivergenceError",
    "empirical_loss",
    "regularized_loss",
    "gradients",
    "init_state",
    "langevin_step",
    "run_flow",
    "two_stage",
    "eta_at",
    "DIVERGENCE_LIMIT",
    "DEFAULT_TRUNCATION",
]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
DEFAULT_TRUNCATION = Truncation(R=10.0, C0=1.0)

# Philox counter tags separating the independent streams of a run.
_TAG_NOISE, _TAG_BATCH, _TAG_INIT = 0, 1, 2


@dataclass(frozen=True)
class HyperParams:
    """Run hyperparameters.  Defaults follow lam_rho = lam_W = beta^{-1}."""

    lambda_rho: float = 1e-3
    lambda_w: float = 1e-3
    beta_inv: float = 1e-3
    gamma: float = 1.0
    eta: float = 0.1
    steps: int = 1000
    trunc: Optional[Truncation] = None
    activation: ActivationKind = ActivationKind.SIGMOID
    seed: int = 0
    batch: Optional[int] = None
    lr_schedule: Tuple[Tuple[int, float], ...] = ()
    eps_stop: float = 0.0
    freeze_w: bool = False

    def __post_init__(self):
        for name in ("lambda_rho", "lambda_w", "beta_inv"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma!r}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps!r}")
        if self.batch is not None and self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch!r}")
        for s, e in self.lr_schedule:
            if s < 0 or not e > 0:
                raise ValueError(f"bad lr schedule entry ({s}, {e})")


def eta_at(hyper: HyperParams, step: int) -> float:
    """Step size in force at ``step`` (last schedule entry at or before it)."""
    eta = hyper.eta
    for s, e in sorted(hyper.lr_schedule):
        if s <= step:
            eta = e
    return eta


@dataclass
class TrainState:
    """Particles, head and the step counter.

    The RNG state is the pair (seed, step): noise for step t is a pure
    function of both, so the counter alone restores the stream.
    """

    cloud: ParticleCloud
    head: LinearHead
    step: int = 0
    seed: int = 0
    W_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.W_init is None:
            self.W_init = self.head.W.copy()

    @property
    def rng_state(self) -> Tuple[int, int]:
        return (self.seed, self.step)

    def copy(self) -> "TrainState":
        return TrainState(self.cloud.copy(), self.head.copy(), self.step, self.seed, self.W_init.copy())


class DivergenceError(FloatingPointError):
    """The explicit scheme left the finite range; carries the step index."""

    def __init__(self, step: int, trajectory: "Optional[Trajectory]" = None):
        super().__init__(f"divergence at step {step}: entry above {DIVERGENCE_LIMIT:g} or non-finite")
        self.step = step
        self.trajectory = trajectory


def _philox(seed: int, index: int, tag: int) -> np.random.Generator:
    key = int(seed) % (1 << 128)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(index), tag]))


def _act(kind: ActivationKind, Z: np.ndarray):
    """sigma(Z) and sigma'(Z) in one pass."""
    if kind is ActivationKind.SIGMOID:
        S = expit(Z)
        return S, S * (1.0 - S)
    S = np.tanh(Z)
    return S, 1.0 - S * S


class _Forward:
    """Shared forward pass; H is reduced over fixed particle blocks."""

    __slots__ = ("S", "Sp", "tA", "dtau", "H")

    def __init__(self, cloud, X, kind, trunc, executor=None):
        N = cloud.N
        if trunc is None:
            self.tA, self.dtau = cloud.A, None
        else:
            self.tA, self.dtau = truncate_eval(trunc, cloud.A)
        starts = list(range(0, N, FEATURE_BLOCK))

        def block(s):
            e = min(s + FEATURE_BLOCK, N)
            S, Sp = _act(kind, cloud.U[:, s:e].T @ X)
            return S, Sp, self.tA[:, s:e] @ S

        parts = list(executor.map(block, starts)) if executor is not None else [block(s) for s in starts]
        H = None
        for _, _, h in parts:
            H = h if H is None else H + h
        self.H = H / N
        self.S = parts[0][0] if len(parts) == 1 else np.vstack([s for s, _, _ in parts])
        self.Sp = parts[0][1] if len(parts) == 1 else np.vstack([sp for _, sp, _ in parts])


def _check(cloud: ParticleCloud, head: LinearHead, X: np.ndarray, Y: np.ndarray):
    if X.shape[0] != cloud.d:
        raise ValueError(f"data dimension {X.shape[0]} does not match particles' d={cloud.d}")
    if head.p != cloud.p:
        raise ValueError(f"head has p={head.p} rows but particles have p={cloud.p}")
    if Y.shape != (head.q, X.shape[1]):
        raise ValueError(f"labels must be {head.q} x {X.shape[1]}, got {Y.shape}")


def _residual(head, H, Y):
    return head.gamma * (head.W.T @ H) - Y


def empirical_loss(cloud, head, ds: Dataset, activation=ActivationKind.SIGMOID, trunc=None) -> float:
    """L_n = (1/2n) ||gamma W^T H - Y||_F^2."""
    _check(cloud, head, ds.X, ds.Y)
    H = _Forward(cloud, ds.X, activation, trunc).H
    r = _residual(head, H, ds.Y)
    return float(np.sum(r * r) / (2.0 * ds.n))


def _reg_terms(cloud, head, hyper) -> float:
    return 0.5 * hyper.lambda_w * float(np.sum(head.W**2)) + 0.5 * hyper.lambda_rho * cloud.second_moment()


def regularized_loss(cloud, head, ds: Dataset, hyper: HyperParams) -> float:
    """L_n + (lam_W/2)||W||_F^2 + (lam_rho/2)(1/N) sum_j ||theta_j||^2."""
    return empirical_loss(cloud, head, ds, hyper.activation, hyper.trunc) + _reg_terms(cloud, head, hyper)


def _grads(cloud, head, X, Y, hyper, fwd=None, include_reg=True):
    if fwd is None:
        fwd = _Forward(cloud, X, hyper.activation, hyper.trunc)
    n = X.shape[1]
    r = _residual(head, fwd.H, Y)
    G = (head.gamma / n) * (head.W @ r)  # p x n
    dA = G @ fwd.S.T
    if fwd.dtau is not None:
        dA *= fwd.dtau
    B = fwd.tA.T @ G  # N x n, B[j, i] = tau(a_j)^T G[:, i]
    dU = X @ (fwd.Sp * B).T
    dW = (head.gamma / n) * (fwd.H @ r.T)
    if include_reg:
        dA += hyper.lambda_rho * cloud.A
        dU += hyper.lambda_rho * cloud.U
        dW += hyper.lambda_w * head.W
    return dA, dU, dW, r, fwd


def gradients(cloud, head, ds: Dataset, hyper: HyperParams, include_reg: bool = True):
    """Return the drift blocks ``(dA, dU, dW)``; see the module docstring."""
    _check(cloud, head, ds.X, ds.Y)
    dA, dU, dW, _, _ = _grads(cloud, head, ds.X, ds.Y, hyper, include_reg=include_reg)
    return dA, dU, dW


def init_state(ds: Dataset, p: int, N: int, hyper: HyperParams) -> TrainState:
    """W_0 = [e_1 .. e_q] and N iid standard Gaussian particles."""
    if p < ds.q:
        raise ValueError(f"need p >= q, got p={p}, q={ds.q}")
    rng = _philox(hyper.seed, 0, _TAG_INIT)
    theta = rng.standard_normal((p + ds.d, N))
    cloud = ParticleCloud(theta[:p].copy(), theta[p:].copy())
    return TrainState(cloud, selector_head(p, ds.q, hyper.gamma), 0, hyper.seed)


def _batch_columns(hyper: HyperParams, n: int, step: int) -> Optional[np.ndarray]:
    b = hyper.batch
    if b is None or b >= n:
        return None
    per_epoch = n // b
    epoch, k = divmod(step, per_epoch)
    perm = _philox(hyper.seed, epoch, _TAG_BATCH).permutation(n)
    return np.sort(perm[k * b:(k + 1) * b])


def _step_inplace(state: TrainState, ds: Dataset, hyper: HyperParams, executor=None):
    """Advance one Euler-Maruyama step in place; returns the full-batch
    drift norm eps_S^2 at the pre-step state when it was computed."""
    cols = _batch_columns(hyper, ds.n, state.step)
    X, Y = (ds.X, ds.Y) if cols is None else (ds.X[:, cols], ds.Y[:, cols])
    cloud, head = state.cloud, state.head
    fwd = _Forward(cloud, X, hyper.activation, hyper.trunc, executor)
    dA, dU, dW, _, _ = _grads(cloud, head, X, Y, hyper, fwd)
    eps2 = None
    if cols is None:
        eps2 = float((np.sum(dA * dA) + np.sum(dU * dU)) / cloud.N)
        if hyper.eps_stop > 0 and eps2 < hyper.eps_stop**2:
            return eps2, True
    eta = eta_at(hyper, state.step)
    A = cloud.A - eta * dA
    U = cloud.U - eta * dU
    if hyper.beta_inv > 0:
        xi = _philox(state.seed, state.step, _TAG_NOISE).standard_normal((cloud.p + cloud.d, cloud.N))
        amp = math.sqrt(2.0 * hyper.beta_inv * eta)
        A += amp * xi[: cloud.p]
        U += amp * xi[cloud.p:]
    W = head.W if hyper.freeze_w else head.W - eta * dW
    for M in (A, U, W):
        if not np.all(np.abs(M) <= DIVERGENCE_LIMIT):
            raise DivergenceError(state.step + 1)
    cloud.A, cloud.U = A, U
    if not hyper.freeze_w:
        head.W = W
    state.step += 1
    return eps2, False


def langevin_step(state: TrainState, ds: Dataset, hyper: HyperParams, executor=None) -> TrainState:
    """One step theta <- theta - eta drift + sqrt(2 eta / beta) xi, W <- W - eta dW.

    Returns a new state; the input is not modified.  Early stopping is not
    applied here.
    """
    new = state.copy()
    _step_inplace(new, ds, dataclasses.replace(hyper, eps_stop=0.0), executor)
    return new


@dataclass
class Record:
    """One logged point of a trajectory."""

    step: int
    stage: str
    eta: float
    loss: float
    reg_loss: float
    eps_s: float
    nc1: float
    nb: float
    sigma_min_w: float
    sigma_max_w: float
    head_drift: float
    kl_init: float
    free_energy: float

    FIELDS = (
        "step", "stage", "eta", "loss", "reg_loss", "eps_s", "nc1", "nb",
        "sigma_min_w", "sigma_max_w", "head_drift", "kl_init", "free_energy",
    )

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class Trajectory:
    stage: str
    initial: Record
    records: List[Record] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self) -> Record:
        return self.records[-1] if self.records else self.initial

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def make_record(state: TrainState, ds: Dataset, hyper: HyperParams, stage: str, diagnostics: bool = True) -> Record:
    """Evaluate every logged metric at ``state`` (full batch)."""
    from . import metrics  # metrics depends on this module

    cloud, head = state.cloud, state.head
    dA, dU, _, r, fwd = _grads(cloud, head, ds.X, ds.Y, hyper)
    loss = float(np.sum(r * r) / (2.0 * ds.n))
    reg = loss + _reg_terms(cloud, head, hyper)
    eps2 = float((np.sum(dA * dA) + np.sum(dU * dU)) / cloud.N)
    nc = metrics.nc1(fwd.H, ds.Y).ratio
    try:
        nb = metrics.balancedness(cloud, head, hyper).nb
    except ValueError:
        nb = math.nan
    sv = np.linalg.svd(head.W, compute_uv=False)
    drift = metrics.head_drift(head.W, state.W_init)
    kl = ent = math.nan
    if diagnostics and cloud.N > metrics.KNN_K:
        ent = metrics.entropy_knn(cloud)
        kl = metrics.kl_to_standard_gaussian(cloud, ent)
    free = reg - hyper.beta_inv * ent if hyper.beta_inv > 0 else reg
    return Record(
        step=state.step,
        stage=stage,
        eta=eta_at(hyper, state.step),
        loss=loss,
        reg_loss=reg,
        eps_s=math.sqrt(eps2),
        nc1=math.nan if nc is None else nc,
        nb=nb,
        sigma_min_w=float(sv[-1]),
        sigma_max_w=float(sv[0]),
        head_drift=drift,
        kl_init=kl,
        free_energy=free,
    )


def run_flow(
    state: TrainState,
    ds: Dataset,
    hyper: HyperParams,
    log_every: int,
    steps: Optional[int] = None,
    stage: str = "joint",
    executor=None,
    diagnostics: bool = True,
) -> Trajectory:
    """Apply ``steps`` (default ``hyper.steps``) Langevin steps to ``state``
    in place, logging a record every ``log_every`` steps.

    With ``hyper.eps_stop > 0`` and full batches the run stops as soon as
    the drift norm falls below the threshold; the stopping point is logged.
    A ``DivergenceError`` carries the partial trajectory.
    """
    steps = hyper.steps if steps is None else steps
    if steps < 1:
        raise ValueError("run_flow needs steps >= 1")
    if log_every < 1:
        raise ValueError("log_every must be >= 1")
    traj = Trajectory(stage, make_record(state, ds, hyper, stage, diagnostics))
    for i in range(1, steps + 1):
        try:
            _, stop = _step_inplace(state, ds, hyper, executor)
        except DivergenceError as exc:
            exc.trajectory = traj
            raise
        if stop:
            traj.stopped_early = True
            if not traj.records or traj.records[-1].step != state.step:
                traj.records.append(make_record(state, ds, hyper, stage, diagnostics))
            break
        if i % log_every == 0:
            traj.records.append(make_record(state, ds, hyper, stage, diagnostics))
    return traj


def two_stage(
    ds: Dataset,
    hyper: HyperParams,
    stage1_steps: int,
    stage2_steps: int,
    p: int = 8,
    N: int = 512,
    log_every: int = 100,
    executor=None,
    diagnostics: bool = True,
    state: Optional[TrainState] = None,
):
    """Two-stage flow.

    Stage 0 sets W_0 = [e_1 .. e_q] and draws Gaussian particles.  Stage 1
    freezes W and runs the truncated Langevin dynamics (``hyper.trunc`` or
    R=10, C0=1) towards the Gibbs minimiser; ``hyper.eps_stop`` applies
    here only.  Stage 2 runs the untruncated joint flow from (W_0, rho_1).

    Returns
    -------
    (TrainState, Trajectory, Trajectory)
    """
    if state is None:
        state = init_state(ds, p, N, hyper)
    h1 = dataclasses.replace(hyper, trunc=hyper.trunc or DEFAULT_TRUNCATION, freeze_w=True)
    h2 = dataclasses.replace(hyper, trunc=None, freeze_w=False, eps_stop=0.0)
    t1 = run_flow(state, ds, h1, log_every, stage1_steps, "stage1", executor, diagnostics)
    t2 = run_flow(state, ds, h2, log_every, stage2_steps, "stage2", executor, diagnostics)
    return state, t1, t2
