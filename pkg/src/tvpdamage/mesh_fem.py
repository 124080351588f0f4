"""Structured simplicial meshes and P1 / P0 finite element plumbing.

Scalar nodal fields are arrays of shape (nV,), vector nodal fields (nV, d)
and element tensor fields (nE, d, d). Operators are dense: at desk scale the
damage form is dense anyway and the vertex count stays below a few hundred.
"""

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from . import tensors as T

SIDES = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}


@dataclass(frozen=True, eq=False)
class Mesh:
    d: int
    vertices: np.ndarray
    cells: np.ndarray
    volumes: np.ndarray
    grads: np.ndarray  # (nE, d+1, d) gradients of the barycentric coordinates
    facets: np.ndarray  # (nF, d) vertex indices of boundary facets
    facet_sides: tuple
    facet_dirichlet: np.ndarray  # bool per facet
    facet_measures: np.ndarray
    extents: tuple = ()
    divisions: tuple = ()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def nV(self):
        return len(self.vertices)

    @property
    def nE(self):
        return len(self.cells)

    @property
    def measure(self):
        return float(self.volumes.sum())

    @property
    def dirichlet_nodes(self):
        mask = np.zeros(self.nV, dtype=bool)
        mask[self.facets[self.facet_dirichlet].ravel()] = True
        return mask

    @property
    def barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    def facet_midpoints(self):
        return self.vertices[self.facets].mean(axis=1)

    def translated(self, shift):
        shift = np.asarray(shift, dtype=float)
        return _finish(self.d, self.vertices + shift, self.cells, self.facets,
                       self.facet_sides, self.facet_dirichlet, self.extents, self.divisions)

    def scaled(self, h):
        return _finish(self.d, self.vertices * h, self.cells, self.facets,
                       self.facet_sides, self.facet_dirichlet,
                       tuple(h * L for L in self.extents), self.divisions)


def _simplex_geometry(X):
    """Volumes and barycentric gradients for simplices with vertex coords X (nE, d+1, d)."""
    d = X.shape[-1]
    J = np.swapaxes(X[:, 1:, :] - X[:, :1, :], 1, 2)  # (nE, d, d), columns are edges
    det = np.linalg.det(J)
    vol = np.abs(det) / factorial(d)
    Jinv = np.linalg.inv(J)  # rows are gradients of lambda_1..lambda_d
    g = np.empty((X.shape[0], d + 1, d))
    g[:, 1:, :] = Jinv
    g[:, 0, :] = -Jinv.sum(axis=1)
    return vol, g


def _finish(d, verts, cells, facets, sides, dirichlet, extents, divisions):
    vol, g = _simplex_geometry(verts[cells])
    if np.any(vol <= 0):
        raise ValueError("degenerate element")
    if d == 1:
        fmeas = np.ones(len(facets))
    else:
        seg = verts[facets[:, 1]] - verts[facets[:, 0]]
        fmeas = np.linalg.norm(seg, axis=1)
    return Mesh(d, verts, cells, vol, g, facets, tuple(sides), np.asarray(dirichlet, bool),
                fmeas, tuple(extents), tuple(divisions))


def build_mesh(extents, divisions, dirichlet=("left",), origin=None):
    """Interval (d=1) or rectangle (d=2) split into simplices.

    Each rectangle cell is cut along its (i,j)-(i+1,j+1) diagonal.
    ``dirichlet`` lists the sides tagged Dirichlet; all others are Neumann.
    """
    extents = tuple(float(x) for x in np.atleast_1d(extents))
    divisions = tuple(int(n) for n in np.atleast_1d(divisions))
    d = len(extents)
    if d not in (1, 2) or len(divisions) != d:
        raise ValueError("extents and divisions must both have length 1 or 2")
    if any(L <= 0 for L in extents):
        raise ValueError(f"non-positive extent in {extents}")
    if any(n < 1 for n in divisions):
        raise ValueError(f"subdivision counts must be >= 1, got {divisions}")
    dirichlet = set(dirichlet)
    unknown = dirichlet - set(SIDES[d])
    if unknown:
        raise ValueError(f"unknown boundary sides {sorted(unknown)}")
    if not dirichlet:
        raise ValueError("Dirichlet part of the boundary is empty")
    o = np.zeros(d) if origin is None else np.asarray(origin, float)

    if d == 1:
        (L,), (n,) = extents, divisions
        verts = (o[0] + np.linspace(0.0, L, n + 1))[:, None]
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        facets = np.array([[0], [n]])
        sides = ("left", "right")
    else:
        (Lx, Ly), (nx, ny) = extents, divisions
        xs = o[0] + np.linspace(0.0, Lx, nx + 1)
        ys = o[1] + np.linspace(0.0, Ly, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        verts = np.column_stack([X.ravel(), Y.ravel()])
        idx = lambda i, j: j * (nx + 1) + i
        cells = []
        for j in range(ny):
            for i in range(nx):
                a, b, c, e = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
                cells += [[a, b, c], [a, c, e]]
        cells = np.array(cells)
        facets, sides = [], []
        for i in range(nx):
            facets.append([idx(i, 0), idx(i + 1, 0)]); sides.append("bottom")
            facets.append([idx(i, ny), idx(i + 1, ny)]); sides.append("top")
        for j in range(ny):
            facets.append([idx(0, j), idx(0, j + 1)]); sides.append("left")
            facets.append([idx(nx, j), idx(nx, j + 1)]); sides.append("right")
        facets = np.array(facets)
    dmask = np.array([s in dirichlet for s in sides])
    return _finish(d, verts, cells, facets, sides, dmask, extents, divisions)


# ---------------------------------------------------------------- operators

def element_means(mesh, v):
    """Barycentric values of a nodal field (scalar or vector)."""
    return np.asarray(v)[mesh.cells].mean(axis=1)


def gradient(mesh, v):
    """Elementwise gradient of a scalar P1 field, shape (nE, d)."""
    return np.einsum("ea,eai->ei", np.asarray(v, float)[mesh.cells], mesh.grads)


def strain(mesh, u):
    u = np.asarray(u, float).reshape(mesh.nV, mesh.d)
    Du = np.einsum("eac,eai->eci", u[mesh.cells], mesh.grads)
    return 0.5 * (Du + np.swapaxes(Du, 1, 2))


def strain_matrix(mesh):
    """B of shape (nE, nsym, (d+1)d): Mandel strain from element displacement dofs."""
    if "B" in mesh._cache:
        return mesh._cache["B"]
    d, nE = mesh.d, mesh.nE
    B = np.zeros((nE, T.nsym(d), (d + 1) * d))
    g = mesh.grads
    for a in range(d + 1):
        if d == 1:
            B[:, 0, a] = g[:, a, 0]
        else:
            B[:, 0, 2 * a] = g[:, a, 0]
            B[:, 1, 2 * a + 1] = g[:, a, 1]
            B[:, 2, 2 * a] = g[:, a, 1] / T.SQ2
            B[:, 2, 2 * a + 1] = g[:, a, 0] / T.SQ2
    mesh._cache["B"] = B
    return B


def element_dofs(mesh):
    d = mesh.d
    return (mesh.cells[:, :, None] * d + np.arange(d)).reshape(mesh.nE, -1)


def scatter_matrix(mesh, Ke, dofs=None, n=None):
    """Sum element matrices Ke (nE, m, m) into a dense global matrix."""
    if dofs is None:
        dofs, n = mesh.cells, mesh.nV
    K = np.zeros((n, n))
    m = dofs.shape[1]
    rows = np.repeat(dofs, m, axis=1).ravel()
    cols = np.tile(dofs, (1, m)).ravel()
    np.add.at(K, (rows, cols), Ke.reshape(len(Ke), -1).ravel())
    return K


def scatter_vector(mesh, fe, dofs=None, n=None):
    if dofs is None:
        dofs, n = mesh.cells, mesh.nV
    out = np.zeros(n)
    np.add.at(out, dofs.ravel(), np.asarray(fe).ravel())
    return out


def _local_mass(d):
    m = np.ones((d + 1, d + 1)) + np.eye(d + 1)
    return m / ((d + 1) * (d + 2))


def mass_matrix(mesh):
    """Consistent P1 mass matrix (exact)."""
    if "M" not in mesh._cache:
        Ke = mesh.volumes[:, None, None] * _local_mass(mesh.d)
        mesh._cache["M"] = scatter_matrix(mesh, Ke)
    return mesh._cache["M"]


def lumped_mass(mesh):
    """Row sums of the mass matrix, i.e. the integrals of the hat functions."""
    if "ml" not in mesh._cache:
        mesh._cache["ml"] = scatter_vector(
            mesh, np.repeat(mesh.volumes[:, None] / (mesh.d + 1), mesh.d + 1, axis=1))
    return mesh._cache["ml"]


def weighted_mass(mesh, dens):
    """Exact P1 mass matrix with an elementwise constant weight."""
    Ke = (np.asarray(dens) * mesh.volumes)[:, None, None] * _local_mass(mesh.d)
    return scatter_matrix(mesh, Ke)


def stiffness(mesh, coef=None):
    """Sum_E coef_E |E| grad(phi_a).grad(phi_b)."""
    c = np.ones(mesh.nE) if coef is None else np.asarray(coef, float)
    Ke = np.einsum("e,eai,ebi->eab", c * mesh.volumes, mesh.grads, mesh.grads)
    return scatter_matrix(mesh, Ke)


def triple_product(mesh, a, b):
    """Exact vector  int a b phi_i  for P1 fields a, b."""
    d = mesh.d
    n = d + 1
    T3 = np.empty((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                alpha = np.bincount([i, j, k], minlength=n)
                T3[i, j, k] = factorial(d) * np.prod([factorial(x) for x in alpha]) / factorial(d + 3)
    ae = np.asarray(a)[mesh.cells]
    be = np.asarray(b)[mesh.cells]
    fe = np.einsum("e,ijk,ej,ek->ei", mesh.volumes, T3, ae, be)
    return scatter_vector(mesh, fe)


def element_source(mesh, dens):
    """Vector  int dens phi_i  for an elementwise constant density."""
    fe = np.repeat((np.asarray(dens) * mesh.volumes / (mesh.d + 1))[:, None], mesh.d + 1, axis=1)
    return scatter_vector(mesh, fe)


def vector_mass(mesh):
    if "Mv" not in mesh._cache:
        mesh._cache["Mv"] = np.kron(mass_matrix(mesh), np.eye(mesh.d))
    return mesh._cache["Mv"]


def _facet_values(mesh, val, which, ncomp):
    """Per-facet values from a constant, a per-facet array or a callable of x."""
    if callable(val):
        val = [val(x) for x in mesh.facet_midpoints()[which]]
    val = np.asarray(val, float)
    shape = (len(which),) if ncomp == 0 else (len(which), ncomp)
    if val.shape == shape:
        return val
    return np.broadcast_to(val, shape).copy()


def traction_vector(mesh, f):
    """Midpoint-rule  int_{Gamma_Neu} f . v  as a vector over displacement dofs."""
    d = mesh.d
    out = np.zeros(mesh.nV * d)
    which = np.flatnonzero(~mesh.facet_dirichlet)
    if f is None or len(which) == 0:
        return out
    fv = _facet_values(mesh, f, which, d)
    w = (mesh.facet_measures[which] / d)[:, None] * fv
    for a in range(d):
        nodes = mesh.facets[which, a]
        for c in range(d):
            np.add.at(out, nodes * d + c, w[:, c])
    return out


def boundary_flux_vector(mesh, g):
    """Midpoint-rule  int_{boundary} g phi_i  over the whole boundary."""
    out = np.zeros(mesh.nV)
    if g is None:
        return out
    which = np.arange(len(mesh.facets))
    gv = _facet_values(mesh, g, which, 0)
    w = mesh.facet_measures * gv / mesh.d
    for a in range(mesh.d):
        np.add.at(out, mesh.facets[:, a], w)
    return out


def body_force_vector(mesh, F):
    """int F . v  with F constant or a P1 vector field (nV, d)."""
    d = mesh.d
    if F is None:
        return np.zeros(mesh.nV * d)
    F = np.asarray(F, float)
    if F.ndim == 1:
        F = np.broadcast_to(F, (mesh.nV, d))
    return (mass_matrix(mesh) @ F).ravel()


def assemble_mass_and_load(mesh, rho, F=None, f=None):
    """Vector mass matrix scaled by rho and the load vector L = int F.v + int_Neu f.v."""
    return rho * vector_mass(mesh), body_force_vector(mesh, F) + traction_vector(mesh, f)


def free_dofs(mesh):
    return np.repeat(~mesh.dirichlet_nodes, mesh.d)


def h1_gram(mesh):
    if "H1" not in mesh._cache:
        mesh._cache["H1"] = mass_matrix(mesh) + stiffness(mesh)
    return mesh._cache["H1"]


def l2_norm(mesh, v):
    v = np.asarray(v, float)
    if v.ndim == 1:
        return float(np.sqrt(max(v @ mass_matrix(mesh) @ v, 0.0)))
    return float(np.sqrt(max(np.einsum("ic,ij,jc->", v, mass_matrix(mesh), v), 0.0)))


def h1_norm(mesh, v):
    v = np.asarray(v, float)
    G = h1_gram(mesh)
    if v.ndim == 1:
        return float(np.sqrt(max(v @ G @ v, 0.0)))
    return float(np.sqrt(max(np.einsum("ic,ij,jc->", v, G, v), 0.0)))


def element_l2_norm(mesh, A):
    """L2 norm of an elementwise constant tensor field."""
    A = np.asarray(A, float)
    sq = (A.reshape(mesh.nE, -1) ** 2).sum(axis=1)
    return float(np.sqrt(sq @ mesh.volumes))


def element_lp_norm(mesh, A, p):
    A = np.asarray(A, float)
    mag = np.sqrt((A.reshape(mesh.nE, -1) ** 2).sum(axis=1))
    return float((mag ** p @ mesh.volumes) ** (1.0 / p))
