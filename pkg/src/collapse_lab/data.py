"""Balanced q-class datasets: synthetic separable generation, CSV I/O and
checks of the data assumptions (bounded inputs, a coordinate with
pairwise-distinct nonzero values)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

__all__ = [
    "DataError",
    "ConstraintError",
    "Dataset",
    "SeparabilitySpec",
    "AssumptionReport",
    "gen_separable",
    "sample_separable",
    "load_csv",
    "write_csv",
    "validate_assumptions",
    "one_hot_blocks",
]

log = logging.getLogger(__name__)

CENTER_RADIUS = 0.9
JITTER = 1e-9
JITTER_COORD = 0
TIE_TOL = 1e-12
# normalised data can land a few ulps above 1
NORM_TOL = 1e-12


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ConstraintError(ValueError):
    """Generator parameters violate a feasibility inequality."""

    def __init__(self, inequality: str, detail: str = ""):
        super().__init__(f"constraint violated: {inequality}" + (f" ({detail})" if detail else ""))
        self.inequality = inequality


def one_hot_blocks(q: int, m: int) -> np.ndarray:
    """Y = [e_1 ... e_1, ..., e_q ... e_q] with m copies of each."""
    return np.kron(np.eye(q), np.ones((1, m)))


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    q: int
    m: int
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DataError("X and Y must be 2-d")
        if self.Y.shape != (self.q, self.q * self.m):
            raise DataError(f"Y must be {self.q} x {self.q * self.m}, got {self.Y.shape}")
        if self.X.shape[1] != self.Y.shape[1]:
            raise DataError("X and Y disagree on the number of samples")
        if not np.array_equal(self.Y, one_hot_blocks(self.q, self.m)):
            raise DataError("Y must be one-hot with contiguous balanced class blocks")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def class_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.q), self.m)


@dataclass
class SeparabilitySpec:
    """Margin tau, norm bound M and one direction per class (columns of
    ``directions``, d x q).  ``centers`` and ``noise_radius`` describe the
    sampling law so that held-out sets come from the same distribution."""

    tau: float
    M: float
    directions: np.ndarray
    centers: np.ndarray
    noise_radius: float

    def margins(self, ds: Dataset) -> np.ndarray:
        """Matrix of u_k^T x_i, shape q x n."""
        return self.directions.T @ ds.X

    def holds(self, ds: Dataset) -> bool:
        S = self.margins(ds)
        own = S[ds.class_index, np.arange(ds.n)]
        other = S.copy()
        other[ds.class_index, np.arange(ds.n)] = -np.inf
        return bool(np.all(own >= self.tau) and np.all(other < -self.tau))


def _direction_norm(tau: float, q: int, r: float) -> float:
    # c = 2 tau (q-1)/r and ||v_k - mean of the others|| = sqrt(q/(q-1))
    return 2.0 * tau * (q - 1) / r * np.sqrt(q / (q - 1))


def gen_separable(
    q: int,
    d: int,
    m: int,
    tau: float,
    M: Optional[float] = None,
    seed: int = 0,
):
    """Generate a bounded, (tau, M)-linearly separable balanced dataset.

    Class k is sampled as ``0.9 v_k + xi`` with orthonormal centres v_k and
    xi uniform in a ball.  The class directions are

        u_k = c (v_k - (1/(q-1)) sum_{k' != k} v_k'),   c = 2 tau (q-1) / 0.9,

    so that u_k^T x = 2 tau (q-1) at the own centre and -2 tau at the other
    centres.  The noise radius is 0.95 min(0.1, 0.9 / (2 (q-1) sqrt(q/(q-1))))
    which keeps ||x|| < 1 and both margins strict.  ``M`` defaults to
    ||u_k||.

    A deterministic jitter of at most 1e-9 is added to the first coordinate
    so its values are pairwise distinct.

    Returns
    -------
    (Dataset, SeparabilitySpec)
    """
    if q < 2:
        raise ConstraintError("q >= 2", f"q={q}")
    if m < 1:
        raise ConstraintError("m >= 1", f"m={m}")
    if d < q:
        raise ConstraintError("d >= q", f"d={d}, q={q}")
    if not tau > 0:
        raise ConstraintError("tau > 0", f"tau={tau}")
    if not tau < 1.0 / np.sqrt(q):
        raise ConstraintError("tau < 1/sqrt(q)", f"tau={tau}, q={q}")
    r = CENTER_RADIUS
    unorm = _direction_norm(tau, q, r)
    if M is None:
        M = unorm
    if not M >= unorm * (1 - 1e-15):
        raise ConstraintError(
            "M >= 2 tau sqrt(q (q-1)) / 0.9", f"M={M}, required {unorm:.6g}"
        )

    rng = np.random.default_rng(seed)
    V = np.linalg.qr(rng.standard_normal((d, q)))[0]
    c = 2.0 * tau * (q - 1) / r
    others = (V.sum(axis=1, keepdims=True) - V) / (q - 1)
    directions = c * (V - others)
    w = np.sqrt(q / (q - 1))
    noise_radius = 0.95 * min(1.0 - r, r / (2.0 * (q - 1) * w))
    spec = SeparabilitySpec(float(tau), float(M), directions, r * V, float(noise_radius))
    ds = _sample(spec, m, rng)
    if not spec.holds(ds):
        raise AssertionError("generated sample violates the margin")  # pragma: no cover
    return ds, spec


def _ball(rng: np.random.Generator, d: int, size: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((d, size))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    return g * radius * rng.uniform(size=size) ** (1.0 / d)


def _sample(spec: SeparabilitySpec, m: int, rng: np.random.Generator) -> Dataset:
    d, q = spec.centers.shape
    X = np.repeat(spec.centers, m, axis=1) + _ball(rng, d, q * m, spec.noise_radius)
    X[JITTER_COORD] += JITTER * np.arange(1, q * m + 1) / (q * m)
    return Dataset(X, one_hot_blocks(q, m), q, m)


def sample_separable(spec: SeparabilitySpec, m: int, seed: int) -> Dataset:
    """Draw a fresh balanced sample (for example a test set) from ``spec``."""
    ds = _sample(spec, m, np.random.default_rng(seed))
    if not spec.holds(ds):
        raise AssertionError("generated sample violates the margin")  # pragma: no cover
    return ds


def load_csv(path, q: int, normalize: bool = False, force: bool = False) -> Dataset:
    """Read ``label,f_1,...,f_d`` rows into a block-ordered Dataset.

    With ``force`` surplus rows of over-represented classes are dropped
    (last rows first) and a note is attached to the dataset; otherwise an
    unbalanced file is an error.
    """
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for rowno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if width is None:
                width = len(rec)
                if width < 2:
                    raise DataError("need a label and at least one feature", rowno)
            elif len(rec) != width:
                raise DataError(f"ragged row: {len(rec)} fields, expected {width}", rowno)
            try:
                lab = int(rec[0])
            except ValueError:
                raise DataError(f"label {rec[0]!r} is not an integer", rowno) from None
            if not 0 <= lab < q:
                raise DataError(f"unknown label {lab}, expected 0..{q - 1}", rowno)
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise DataError(f"bad feature value: {exc}", rowno) from None
            if not all(np.isfinite(vals)):
                raise DataError("non-finite feature value", rowno)
            labels.append(lab)
            rows.append((rowno, vals))
    if not rows:
        raise DataError("empty file")

    labels = np.array(labels)
    counts = np.bincount(labels, minlength=q)
    notes = []
    m = int(counts.min())
    if np.any(counts != counts[0]):
        if not force:
            k = int(np.argmax(counts != counts[0]))
            first = next(r for (r, _), lab in zip(rows, labels) if lab == k)
            raise DataError(f"unbalanced classes, counts {counts.tolist()}", first)
        if m == 0:
            raise DataError(f"class {int(np.argmin(counts))} is empty; cannot balance")
        notes.append(f"dropped {int(counts.sum() - q * m)} surplus rows to balance classes at m={m}")
        log.warning(notes[-1])

    order = [np.flatnonzero(labels == k)[:m] for k in range(q)]
    idx = np.concatenate(order)
    X = np.array([rows[i][1] for i in idx], dtype=float).T
    if normalize:
        scale = np.linalg.norm(X, axis=0).max()
        if scale > 0:
            X = X / scale
    return Dataset(X, one_hot_blocks(q, m), q, m, notes)


def write_csv(ds: Dataset, path) -> None:
    """Emit ``label,f_1,...,f_d`` rows using shortest round-trip reprs."""
    lines = []
    for i, k in enumerate(ds.class_index):
        lines.append(",".join([str(int(k))] + [repr(float(v)) for v in ds.X[:, i]]))
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text)


@dataclass
class AssumptionReport:
    bounded: bool
    max_norm: float
    distinct_coordinate: bool
    witness: Optional[int]

    @property
    def ok(self) -> bool:
        return self.bounded and self.distinct_coordinate


def validate_assumptions(ds: Dataset, tol: float = TIE_TOL) -> AssumptionReport:
    """Check ||x_i|| <= 1 (up to NORM_TOL) and find a coordinate s whose values x_i[s] are
    nonzero and pairwise distinct (gaps above ``tol``)."""
    norms = np.linalg.norm(ds.X, axis=0)
    max_norm = float(norms.max()) if norms.size else 0.0
    witness = None
    for s in range(ds.d):
        v = ds.X[s]
        if np.any(np.abs(v) <= tol):
            continue
        if v.size < 2 or np.min(np.diff(np.sort(v))) > tol:
            witness = s
            break
    return AssumptionReport(max_norm <= 1.0 + NORM_TOL, max_norm, witness is not None, witness)
