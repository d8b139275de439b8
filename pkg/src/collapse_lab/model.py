"""Activations, second-layer truncation, particle clouds and the feature map.

The network is the finite-width mean-field model

    h(x) = (1/N) sum_j tau(a_j) sigma(u_j^T x),    f(x) = gamma W^T h(x),

with particles theta_j = (a_j, u_j) stored column-wise in ``A`` (p x N)
and ``U`` (d x N).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "ActivationKind",
    "Truncation",
    "ParticleCloud",
    "LinearHead",
    "activation_eval",
    "truncate_eval",
    "features",
    "predict",
    "selector_head",
    "gaussian_cloud",
]

# Particles are reduced into the feature matrix in fixed blocks so the
# summation order never depends on how many workers evaluate them.
FEATURE_BLOCK = 256


class ActivationKind(enum.Enum):
    """Smooth activation with its derivative bound C1.

    C1 bounds |sigma|, |sigma'|, |sigma''|, |sigma'''| and |(z sigma'(z))'|
    uniformly on the real line.  For the sigmoid all five are at most 1.
    For tanh the third derivative reaches -2 at the origin, so C1 = 2.
    """

    SIGMOID = "sigmoid"
    TANH = "tanh"

    @property
    def C1(self) -> float:
        return 1.0 if self is ActivationKind.SIGMOID else 2.0

    @classmethod
    def parse(cls, name: str) -> "ActivationKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}; expected 'sigmoid' or 'tanh'") from None

    def __call__(self, z, order: int = 0):
        return activation_eval(self, z, order)


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation_eval(kind: ActivationKind, z, order: int = 0):
    """Evaluate the ``order``-th derivative of the activation at ``z``.

    Works elementwise on arrays; scalars in give scalars out.
    """
    if order not in (0, 1, 2, 3):
        raise ValueError(f"derivative order must be in 0..3, got {order!r}")
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    if kind is ActivationKind.SIGMOID:
        s = _sigmoid(z.reshape(-1)).reshape(z.shape)
        if order == 0:
            out = s
        elif order == 1:
            out = s * (1.0 - s)
        elif order == 2:
            out = s * (1.0 - s) * (1.0 - 2.0 * s)
        else:
            out = s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)
    elif kind is ActivationKind.TANH:
        t = np.tanh(z)
        sech2 = 1.0 - t * t
        if order == 0:
            out = t
        elif order == 1:
            out = sech2
        elif order == 2:
            out = -2.0 * t * sech2
        else:
            out = -2.0 * sech2 * (1.0 - 3.0 * t * t)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return float(out) if scalar else out


@dataclass(frozen=True)
class Truncation:
    """Smooth clipping tau_R of the second-layer coefficients.

    tau_R(z) = z on |z| <= R and sign(z) (R + C0) on |z| >= 2R.  On the band
    R < |z| < 2R the map is a C^2 interpolant matching value, slope and
    curvature at both ends:

    * C0 <= R/2: the slope decays from 1 to 0 along a cubic smoothstep over
      [R, R + 2 C0] and stays 0 afterwards (a quartic piece then a constant).
    * C0 > R/2: a single quintic on [R, 2R].

    The quintic alone is not monotone when C0 < 0.4 R (for example R = 5,
    C0 = 1 overshoots and comes back), which is why the short ramp is used
    for small overshoots.  The realised sup-slope is checked against
    max(1, C0) at construction.
    """

    R: float = 10.0
    C0: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.R) and self.R > 1.0):
            raise ValueError(f"truncation radius must satisfy R > 1, got R={self.R!r}")
        if not (np.isfinite(self.C0) and self.C0 > 0.0):
            raise ValueError(f"truncation overshoot must satisfy C0 > 0, got C0={self.C0!r}")
        grid = np.linspace(self.R, 2.0 * self.R, 20001)
        _, slope = truncate_eval(self, grid)
        if slope.min() < -1e-12:
            raise ValueError(f"interpolant is not monotone for R={self.R}, C0={self.C0}")
        bound = max(1.0, self.C0)
        if slope.max() > bound + 1e-12:
            raise ValueError(
                f"interpolant slope {slope.max():.6g} exceeds max(1, C0)={bound} "
                f"for R={self.R}, C0={self.C0}"
            )

    @property
    def uses_ramp(self) -> bool:
        return self.C0 <= 0.5 * self.R


def _band_value_slope(t: Truncation, s):
    """Value offset and slope on the band, s = |z| - R in [0, R]."""
    R, C0 = t.R, t.C0
    if t.uses_ramp:
        ell = 2.0 * C0
        x = np.clip(s / ell, 0.0, 1.0)
        # slope = 1 - (3x^2 - 2x^3); integral over [0, x] times ell
        slope = 1.0 - x * x * (3.0 - 2.0 * x)
        val = ell * (x - x**3 + 0.5 * x**4)
        return val, slope
    x = s / R
    delta = C0 / R - 1.0
    c3 = 4.0 + 10.0 * delta
    c4 = -7.0 - 15.0 * delta
    c5 = 3.0 + 6.0 * delta
    val = R * (x + c3 * x**3 + c4 * x**4 + c5 * x**5)
    slope = 1.0 + 3.0 * c3 * x**2 + 4.0 * c4 * x**3 + 5.0 * c5 * x**4
    return val, slope


def truncate_eval(t: Truncation, z):
    """Return ``(tau_R(z), tau_R'(z))``; elementwise on arrays."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    sgn = np.sign(z)
    value = z.copy()
    slope = np.ones_like(z)

    outer = az >= 2.0 * t.R
    value[outer] = sgn[outer] * (t.R + t.C0)
    slope[outer] = 0.0

    band = (az > t.R) & ~outer
    if np.any(band):
        v, d = _band_value_slope(t, az[band] - t.R)
        value[band] = sgn[band] * (t.R + v)
        slope[band] = d
    if scalar:
        return float(value), float(slope)
    return value, slope


@dataclass
class ParticleCloud:
    """N particles; column j of ``A`` is a_j, column j of ``U`` is u_j."""

    A: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        if self.A.ndim != 2 or self.U.ndim != 2:
            raise ValueError("A and U must be 2-d arrays")
        if self.A.shape[1] != self.U.shape[1]:
            raise ValueError(f"A has {self.A.shape[1]} particles but U has {self.U.shape[1]}")
        if self.A.shape[1] < 1:
            raise ValueError("a particle cloud needs N >= 1")
        if not self.is_finite():
            raise ValueError("particle cloud has non-finite entries")

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Stacked particles, shape (p + d, N)."""
        return np.vstack([self.A, self.U])

    def second_moment(self) -> float:
        return float((np.sum(self.A**2) + np.sum(self.U**2)) / self.N)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.U)))

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.A.copy(), self.U.copy())


@dataclass
class LinearHead:
    """Final linear layer W (p x q) with output scale gamma."""

    W: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2:
            raise ValueError("W must be a 2-d array")
        p, q = self.W.shape
        if p < q:
            raise ValueError(f"the head needs p >= q, got p={p}, q={q}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma!r}")

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @property
    def q(self) -> int:
        return self.W.shape[1]

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.W, compute_uv=False)

    def copy(self) -> "LinearHead":
        return LinearHead(self.W.copy(), self.gamma)


def selector_head(p: int, q: int, gamma: float = 1.0) -> LinearHead:
    """Head whose columns are e_1..e_q, so that W^T W = I_q."""
    return LinearHead(np.eye(p, q), gamma)


def gaussian_cloud(p: int, d: int, N: int, rng: np.random.Generator) -> ParticleCloud:
    """Draw N iid particles from the standard Gaussian on R^{p+d}."""
    theta = rng.standard_normal((p + d, N))
    return ParticleCloud(theta[:p].copy(), theta[p:].copy())


def _check_x(cloud: ParticleCloud, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != cloud.d:
        raise ValueError(f"X must be {cloud.d} x n, got shape {X.shape}")
    return X


def features(
    cloud: ParticleCloud,
    X: np.ndarray,
    kind: ActivationKind = ActivationKind.SIGMOID,
    trunc: Optional[Truncation] = None,
    executor=None,
) -> np.ndarray:
    """Feature matrix H (p x n) with column i equal to h(x_i).

    ``executor`` is an optional ``concurrent.futures`` executor used to
    evaluate particle blocks concurrently; the reduction over blocks is
    always performed in the same order, so the result is bit-identical to
    the serial evaluation.
    """
    X = _check_x(cloud, X)
    A = cloud.A if trunc is None else truncate_eval(trunc, cloud.A)[0]
    U = cloud.U
    N = cloud.N
    starts = range(0, N, FEATURE_BLOCK)

    def block(s):
        e = min(s + FEATURE_BLOCK, N)
        return A[:, s:e] @ activation_eval(kind, U[:, s:e].T @ X)

    parts = executor.map(block, starts) if executor is not None else map(block, starts)
    H = None
    for part in parts:
        H = part if H is None else H + part
    return H / N


def predict(head: LinearHead, H: np.ndarray) -> np.ndarray:
    """Network output gamma W^T H (q x n)."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != head.p:
        raise ValueError(f"H must have {head.p} rows, got shape {H.shape}")
    return head.gamma * (head.W.T @ H)
