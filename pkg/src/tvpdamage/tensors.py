"""Symmetric and deviatoric matrix algebra for d in {1, 2}.

Matrices are plain numpy arrays of shape (..., d, d). For the element
solvers they are also written in Mandel coordinates, an orthonormal basis
of the symmetric space in which the Frobenius product becomes the
Euclidean dot product.
"""

import numpy as np

SQ2 = np.sqrt(2.0)


def _check_square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected (..., d, d) array, got shape {A.shape}")
    return A


def sym_part(A):
    A = _check_square(A)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def trace(A):
    A = _check_square(A)
    return np.trace(A, axis1=-2, axis2=-1)


def deviatoric_part(A):
    """A - tr(A)/d I, batched over leading axes."""
    A = _check_square(A)
    d = A.shape[-1]
    out = A.copy()
    tr = trace(A) / d
    for i in range(d):
        out[..., i, i] -= tr
    return out


def frobenius(A, B):
    A = _check_square(A)
    B = _check_square(B)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    return np.einsum("...ij,...ij->...", A, B)


def norm(A):
    return np.sqrt(frobenius(A, A))


def nsym(d):
    return d * (d + 1) // 2


def ndev(d):
    return nsym(d) - 1


def to_mandel(A):
    A = _check_square(A)
    d = A.shape[-1]
    if d == 1:
        return A[..., 0, :].copy()
    if d == 2:
        return np.stack([A[..., 0, 0], A[..., 1, 1], SQ2 * A[..., 0, 1]], axis=-1)
    raise ValueError(f"unsupported dimension {d}")


def from_mandel(v, d):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != nsym(d):
        raise ValueError(f"expected {nsym(d)} Mandel components, got {v.shape[-1]}")
    out = np.zeros(v.shape[:-1] + (d, d))
    if d == 1:
        out[..., 0, 0] = v[..., 0]
    else:
        out[..., 0, 0] = v[..., 0]
        out[..., 1, 1] = v[..., 1]
        out[..., 0, 1] = out[..., 1, 0] = v[..., 2] / SQ2
    return out


def mandel_identity(d):
    """Mandel coordinates of the identity matrix."""
    return np.array([1.0]) if d == 1 else np.array([1.0, 1.0, 0.0])


def dev_basis(d):
    """(nsym, ndev) matrix whose orthonormal columns span the trace-free subspace."""
    if d == 1:
        return np.zeros((1, 0))
    return np.array([[1.0 / SQ2, 0.0], [-1.0 / SQ2, 0.0], [0.0, 1.0]])


def isotropic_mandel(lam, mu, d):
    """Mandel matrix of A -> lam tr(A) I + 2 mu A."""
    one = mandel_identity(d)
    return lam * np.outer(one, one) + 2.0 * mu * np.eye(nsym(d))


def isotropic_bounds(lam, mu, d):
    """Smallest and largest eigenvalue of the isotropic action."""
    eig = [2.0 * mu, d * lam + 2.0 * mu] if d > 1 else [lam + 2.0 * mu]
    return min(eig), max(eig)
