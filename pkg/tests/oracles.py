"""Independent reference computations used across the test suite.

Everything here is written from the defining formulas with plain loops or
a different factoring than the library, so agreement is meaningful.
"""

import math

import numpy as np

from collapse_lab.data import Dataset, one_hot_blocks
from collapse_lab.model import LinearHead, ParticleCloud, activation_eval, truncate_eval
from collapse_lab.training import regularized_loss


def random_problem(seed, p=4, q=3, d=5, m=4, N=16, gamma=None):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((d, q * m))
    X /= np.linalg.norm(X, axis=0).max()
    ds = Dataset(X, one_hot_blocks(q, m), q, m)
    cloud = ParticleCloud(rng.standard_normal((p, N)), rng.standard_normal((d, N)))
    g = float(rng.uniform(0.5, 2.0)) if gamma is None else gamma
    head = LinearHead(rng.standard_normal((p, q)), g)
    return ds, cloud, head


def fd_gradients(cloud, head, ds, hyper, h=1e-5):
    """Central differences of the regularised loss.  Particle blocks are
    multiplied by N: the drift of particle j is N times dL/dtheta_j."""

    def L(A, U, W):
        return regularized_loss(ParticleCloud(A, U), LinearHead(W, head.gamma), ds, hyper)

    out = []
    base = [cloud.A, cloud.U, head.W]
    for b in range(3):
        G = np.zeros_like(base[b])
        for idx in np.ndindex(*base[b].shape):
            plus = [M.copy() for M in base]
            minus = [M.copy() for M in base]
            plus[b][idx] += h
            minus[b][idx] -= h
            G[idx] = (L(*plus) - L(*minus)) / (2 * h)
        out.append(G * (cloud.N if b < 2 else 1))
    return out


def block_rel_err(g, ref):
    return float(np.max(np.abs(g - ref)) / max(np.max(np.abs(ref)), 1e-300))


def loss_loop(cloud, head, ds, kind, trunc=None):
    """(1/2n) sum_i sum_c (gamma sum_k W[k,c] h_k(x_i) - Y[c,i])^2 by loops."""
    p, N = cloud.A.shape
    total = 0.0
    for i in range(ds.n):
        h = [0.0] * p
        for j in range(N):
            s = activation_eval(kind, float(cloud.U[:, j] @ ds.X[:, i]))
            for k in range(p):
                a = cloud.A[k, j] if trunc is None else truncate_eval(trunc, cloud.A[k, j])[0]
                h[k] += a * s / N
        for c in range(ds.q):
            f = head.gamma * sum(head.W[k, c] * h[k] for k in range(p))
            total += (f - ds.Y[c, i]) ** 2
    return total / (2 * ds.n)


def nc1_loop(H, labels):
    """Within/total centred variation via explicit per-class loops."""
    p, n = H.shape
    gmean = [sum(H[r, i] for i in range(n)) / n for r in range(p)]
    classes = sorted(set(labels))
    means = {}
    for k in classes:
        idx = [i for i in range(n) if labels[i] == k]
        means[k] = [sum(H[r, i] for i in idx) / len(idx) for r in range(p)]
    within = sum((H[r, i] - means[labels[i]][r]) ** 2 for i in range(n) for r in range(p))
    total = sum((H[r, i] - gmean[r]) ** 2 for i in range(n) for r in range(p))
    return within, total


def test_error_loop(F, labels, q):
    """Class-averaged mismatch with lowest-index argmax, per sample."""
    wrong = [0] * q
    count = [0] * q
    for i in range(F.shape[1]):
        best = 0
        for c in range(1, F.shape[0]):
            if F[c, i] > F[best, i]:
                best = c
        count[labels[i]] += 1
        wrong[labels[i]] += best != labels[i]
    return sum(w / c for w, c in zip(wrong, count)) / q


test_error_loop.__test__ = False


def flow_constants_ref(n, d, p, C1, lam, gamma, q):
    """Second implementation of the joint-flow constants, factored
    differently (shared sub-expressions named, products regrouped)."""
    D = p + d
    RW = 1 / 2
    Rr = min(D, (lam / (8 * n * C1)) ** 2)
    a1 = lam / n / 2
    a2 = 32 * math.sqrt(2 * n * 1.5 * Rr) * (1 + 2 * C1 * d * math.sqrt(D)) / lam
    g = 2 * C1 * (1 + 2 * math.sqrt(d * D))  # 4 C1 sqrt(d D) + 2 C1
    k12 = 4 * math.sqrt(1.5 * p / n) * g * math.sqrt(Rr)
    b1, b2 = k12 / a1, 3 + k12 * a2
    h = 2 * C1 * d * (2 * math.sqrt(d * D) + 1)  # 4 C1 d^{3/2} sqrt(D) + 2 C1 d
    k34 = 4 * p * math.sqrt(1.5 * n) * g * math.sqrt(Rr) * h
    b3, b4 = k34 / a1, k34 * a2
    c3 = max(8 * b1, 2 * math.sqrt(2) * b3 / math.sqrt(Rr))
    c4 = (6 * (a1**2 * max((b2 / b1) ** 2, (b4 / b3) ** 2) + a2**2) / gamma**2
          + 2.25 * q + 3 * Rr + D * math.log(2 * math.pi) / 2 + 2 + 2 * D * math.log(8 * math.pi))
    c5 = min(b1 / b2, b3 / b4) / gamma
    return dict(A1=a1, A2=a2, B1=b1, B2=b2, B3=b3, B4=b4, C3=c3, C4=c4, C5=c5, R_W=RW, R_rho=Rr)


def test_bound_ref(d, p, C0, C1, M, tau, q, n, delta0, delta):
    D = p + d
    m2 = M * M / (2 * tau * tau)
    c6 = 1 + 2 * C1 * (q * q * d + p * C0 * C0) + m2 + D / 4
    c7 = c6 + D / 2 + math.log(2 * math.pi)
    c8 = 3 * c6 + D * math.log(2 * math.pi) / 2
    c9 = (18 + 36 * C1 * (d + p * C0 * C0) + 9 * m2 + 9 * D / 4 + D / 2
          + 1.5 * D * math.log(2 * math.pi) + 2 + 2 * D * math.log(8 * math.pi))
    c10 = 50 * q * c9 * C1 * math.sqrt(math.pi)
    c11 = 640 * (C1 * c9) ** 2
    bound = c10 * math.log(c11 * n / delta0) / math.sqrt(2 * n) + 6 * q * math.sqrt(math.log(2 / delta) / n)
    return dict(C6=c6, C7=c7, C8=c8, C9=c9, C10=c10, C11=c11), bound


test_bound_ref.__test__ = False
