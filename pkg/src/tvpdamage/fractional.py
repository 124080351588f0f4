"""Nonlocal bilinear form on gradients of P1 damage fields.

    a_s(z1, z2) = int int (grad z1(x) - grad z1(y)).(grad z2(x) - grad z2(y)) / |x - y|^(d + 2(s-1))

For P1 fields the gradients are elementwise constant, so the form reduces to
kernel weights K(E, E') = int_E int_E' |x - y|^-alpha, alpha = d + 2s - 2,
one per ordered element pair. With W the weight matrix and G the stacked
elementwise gradient operator,

    A = 2 G^T ((diag(W 1) - W) kron I_d) G,

a weighted graph Laplacian pulled back to nodal values.

Weights. In 1D the double integral over two intervals is closed form. In 2D
well-separated triangle pairs use a collapsed Gauss product rule, near pairs
are subdivided (red refinement) until admissible, and touching pairs use the
exact self-similarity of the kernel: refining two triangles that share a
vertex V produces one child pair that is the parent pair scaled by 1/2 about
V, whose weight is 2^(alpha - 4) times the parent's. Solving that relation
for the parent removes the singularity without truncation error.
"""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ETA = 1.0        # admissibility: dist >= ETA * max diameter
NGAUSS = 4       # Gauss points per direction of the collapsed rule
MAX_DEPTH = 12


@dataclass(frozen=True, eq=False)
class FractionalForm:
    s: float
    d: int
    matrix: np.ndarray
    weights: np.ndarray  # (nE, nE) kernel weights, zero diagonal

    def apply(self, z):
        return apply_As(self, z)

    def value(self, z1, z2=None):
        z2 = z1 if z2 is None else z2
        return float(np.asarray(z1) @ self.matrix @ np.asarray(z2))

    def dump_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def kernel_exponent(d, s):
    return d + 2.0 * (s - 1.0)


def check_exponent(d, s):
    """Admissible s lies in (d/2, 3/2). Above 3/2 the touching-pair weights
    diverge, so P1 fields have no finite seminorm there."""
    lo = d / 2.0
    if not (lo < s < 1.5):
        raise ValueError(f"s = {s} outside ({lo}, 1.5) for d = {d}")
    if d == 1 and s <= 1.0:
        log.warning("s = %g <= 1 in d = 1: H^s does not embed in C0; "
                    "uniform-convergence based audits are not meaningful", s)


# ---------------------------------------------------------------- 1D weights

def _second_antiderivative(r, alpha):
    r = np.asarray(r, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if abs(alpha - 1.0) < 1e-14:
            out = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)) - r, 0.0)
        else:
            out = np.where(r > 0, r ** (2.0 - alpha), 0.0) / ((1.0 - alpha) * (2.0 - alpha))
    return out


def interval_pair_weight(a, b, c, e, alpha):
    """int_a^b int_c^e |x-y|^-alpha for b <= c (disjoint or touching)."""
    F = lambda r: _second_antiderivative(r, alpha)
    return F(e - a) - F(e - b) - F(c - a) + F(c - b)


def _weights_1d(mesh, alpha):
    x = mesh.vertices[mesh.cells, 0]
    lo, hi = x.min(axis=1), x.max(axis=1)
    order = np.argsort(lo)
    W = np.zeros((mesh.nE, mesh.nE))
    for ii in range(mesh.nE):
        i = order[ii]
        j = order[ii + 1:]
        W[i, j] = interval_pair_weight(lo[i], hi[i], lo[j], hi[j], alpha)
        W[j, i] = W[i, j]
    return W


# ---------------------------------------------------------------- 2D weights

def _collapsed_rule(n):
    g, w = np.polynomial.legendre.leggauss(n)
    g, w = 0.5 * (g + 1.0), 0.5 * w
    U, V = np.meshgrid(g, g, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    lam1 = U.ravel()
    lam2 = (V * (1.0 - U)).ravel()
    wts = (WU * WV * (1.0 - U)).ravel() * 2.0  # reference area 1/2 -> weights sum to 1
    bary = np.column_stack([1.0 - lam1 - lam2, lam1, lam2])
    return bary, wts


_BARY, _WTS = _collapsed_rule(NGAUSS)


def _areas(P):
    a, b = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def _gauss_pairs(P, Q, alpha):
    """Product-rule weights for batches of triangle pairs P, Q of shape (n, 3, 2)."""
    xp = np.einsum("qa,nai->nqi", _BARY, P)
    xq = np.einsum("qa,nai->nqi", _BARY, Q)
    r = np.linalg.norm(xp[:, :, None, :] - xq[:, None, :, :], axis=-1)
    val = np.einsum("p,q,npq->n", _WTS, _WTS, r ** (-alpha))
    return val * _areas(P) * _areas(Q)


def _children(P):
    a, b, c = P
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    return [np.array(t) for t in ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))]


def _gap(P, Q):
    """Lower bound of the distance between two triangles (centroid balls)."""
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    rp = np.linalg.norm(P - cp, axis=1).max()
    rq = np.linalg.norm(Q - cq, axis=1).max()
    return np.linalg.norm(cp - cq) - rp - rq


def _diam(P):
    return max(np.linalg.norm(P[i] - P[j]) for i in range(3) for j in range(i))


def _shared(P, Q, tol):
    return [(i, j) for i in range(3) for j in range(3) if np.linalg.norm(P[i] - Q[j]) <= tol]


def _collect(P, Q, coef, leaves, tol, depth=0):
    """Append (P, Q, coef) quadrature leaves whose weighted sum is coef * K(P, Q)."""
    sh = _shared(P, Q, tol)
    if len(sh) == 2:
        (i0, j0), (i1, j1) = sh
        # order P = (A, B, C), Q = (A, B, D); the corner children at A and at B
        # are copies of the pair scaled by 1/2
        P = np.array([P[i0], P[i1], P[3 - i0 - i1]])
        Q = np.array([Q[j0], Q[j1], Q[3 - j0 - j1]])
        c = coef / (1.0 - 2.0 * 2.0 ** (leaves.alpha - 4.0))
        skip = {(0, 0), (1, 1)}
    elif len(sh) == 1:
        (i, j), = sh
        P, Q = np.roll(P, -i, axis=0), np.roll(Q, -j, axis=0)
        c = coef / (1.0 - 2.0 ** (leaves.alpha - 4.0))
        skip = {(0, 0)}
    else:
        h = max(_diam(P), _diam(Q))
        if depth >= MAX_DEPTH or _gap(P, Q) >= ETA * h:
            leaves.append(P, Q, coef)
            return
        c, skip = coef, set()
    cP, cQ = _children(P), _children(Q)
    for a, p in enumerate(cP):
        for b, q in enumerate(cQ):
            if (a, b) not in skip:
                _collect(p, q, c, leaves, 0.5 * tol, depth + 1)


class _Leaves:
    def __init__(self, alpha):
        self.alpha = alpha
        self.P, self.Q, self.c = [], [], []

    def append(self, P, Q, c):
        self.P.append(P); self.Q.append(Q); self.c.append(c)

    def total(self):
        if not self.P:
            return 0.0
        vals = _gauss_pairs(np.array(self.P), np.array(self.Q), self.alpha)
        return float(np.dot(vals, self.c))


def triangle_pair_weight(P, Q, alpha):
    """Kernel weight of two distinct triangles of a conforming mesh."""
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    leaves = _Leaves(alpha)
    _collect(P, Q, 1.0, leaves, 1e-9 * max(_diam(P), _diam(Q)))
    return leaves.total()


def _weights_2d(mesh, alpha):
    X = mesh.vertices[mesh.cells]
    nE = mesh.nE
    W = np.zeros((nE, nE))
    iu, ju = np.triu_indices(nE, k=1)
    diam = np.array([_diam(P) for P in X])
    cent = X.mean(axis=1)
    # cheap admissibility screen: centroid distance minus circumradius bounds
    rad = np.linalg.norm(X - cent[:, None, :], axis=2).max(axis=1)
    gap = np.linalg.norm(cent[iu] - cent[ju], axis=1) - rad[iu] - rad[ju]
    far = gap >= ETA * np.maximum(diam[iu], diam[ju])
    fi, fj = iu[far], ju[far]
    for start in range(0, len(fi), 2048):
        sl = slice(start, start + 2048)
        W[fi[sl], fj[sl]] = _gauss_pairs(X[fi[sl]], X[fj[sl]], alpha)
    cache = {}
    scale = max(diam.max(), 1e-300)
    for i, j in zip(iu[~far], ju[~far]):
        key = tuple(np.round((np.concatenate([X[i], X[j]]) - X[i, 0]) / scale, 9).ravel())
        if key not in cache:
            cache[key] = triangle_pair_weight(X[i], X[j], alpha)
        W[i, j] = cache[key]
    return W + W.T


def kernel_weights(mesh, s):
    alpha = kernel_exponent(mesh.d, s)
    return _weights_1d(mesh, alpha) if mesh.d == 1 else _weights_2d(mesh, alpha)


def gradient_operator(mesh):
    """(nE*d, nV) matrix stacking the elementwise gradients of P1 fields."""
    d = mesh.d
    G = np.zeros((mesh.nE * d, mesh.nV))
    rows = (np.arange(mesh.nE)[:, None, None] * d + np.arange(d)[None, None, :])
    rows = np.broadcast_to(rows, (mesh.nE, d + 1, d))
    cols = np.broadcast_to(mesh.cells[:, :, None], (mesh.nE, d + 1, d))
    np.add.at(G, (rows.ravel(), cols.ravel()), mesh.grads.ravel())
    return G


def assemble_as(mesh, s):
    check_exponent(mesh.d, s)
    W = kernel_weights(mesh, s)
    Lw = np.diag(W.sum(axis=1)) - W
    G = gradient_operator(mesh)
    A = 2.0 * G.T @ np.kron(Lw, np.eye(mesh.d)) @ G
    A = 0.5 * (A + A.T)
    return FractionalForm(float(s), mesh.d, A, W)


def apply_As(form, z):
    z = np.asarray(z, float)
    if z.shape[0] != form.matrix.shape[0]:
        raise ValueError(f"size mismatch: {z.shape[0]} vs {form.matrix.shape[0]}")
    return form.matrix @ z


def scaling_exponent(d, s):
    """A on a mesh dilated by h equals h**scaling_exponent times A (same nodal values)."""
    return d - 2.0 * s
