"""Independent reference computations used by the tests.

None of these call into the package's solvers; they only share the input
conventions (Mandel vectors, deviatoric coordinates, mesh layout).
"""

import numpy as np
from scipy import integrate
from shapely import affinity
from shapely.geometry import Polygon


# ---------------------------------------------------------------- kernel weights

def interval_weight(a, b, c, e, alpha):
    """int_a^b int_c^e |x-y|^-alpha by adaptive quadrature (singular corner allowed)."""
    if b < c:
        val, _ = integrate.dblquad(lambda y, x: abs(x - y) ** (-alpha), a, b, c, e,
                                   epsabs=1e-14, epsrel=1e-12)
        return val
    # touching at b = c: substitute u = b - x, v = y - c and go polar in (u, v)
    L1, L2 = b - a, e - c

    def ray(phi):
        cs, sn = np.cos(phi), np.sin(phi)
        R = min(L1 / cs if cs > 0 else np.inf, L2 / sn if sn > 0 else np.inf)
        # int_0^R rho^(1-alpha) (cs + sn)^-alpha d rho
        return (cs + sn) ** (-alpha) * R ** (2 - alpha) / (2 - alpha)

    corner = np.arctan2(L2, L1)
    val, _ = integrate.quad(ray, 0, np.pi / 2, points=[corner], epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def _breaks(P, Q, u, R):
    """rho where a vertex of Q + rho u crosses an edge line of P, or a vertex of P one of Q."""
    out = [0.0, R]
    for A, B, sgn in ((P, Q, 1.0), (Q, P, -1.0)):
        for i in range(3):
            a, b = A[i], A[(i + 1) % 3]
            n = np.array([b[1] - a[1], a[0] - b[0]])
            den = sgn * (u @ n)
            if abs(den) < 1e-15:
                continue
            for q in B:
                rho = (a - q) @ n / den
                if 0 < rho < R:
                    out.append(rho)
    return np.unique(out)


def _power_integral(a, b, e):
    if abs(e + 1) < 1e-14:
        return np.log(b / a)
    return (b ** (e + 1) - (a ** (e + 1) if a > 0 else 0.0)) / (e + 1)


def triangle_weight(P, Q, alpha):
    """int_P int_Q |x-y|^-alpha written as int |r|^-alpha area(P n (Q + r)) dr.

    Along each ray the overlap area is piecewise quadratic in rho; each piece
    is fitted from three area evaluations and integrated against rho^(1-alpha)
    in closed form. The angle integral is adaptive.
    """
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    pP, pQ = Polygon(P), Polygon(Q)
    R = max(np.linalg.norm(p - q) for p in P for q in Q)

    def area(rho, u):
        return pP.intersection(affinity.translate(pQ, rho * u[0], rho * u[1])).area

    def inner(phi):
        u = np.array([np.cos(phi), np.sin(phi)])
        br = _breaks(P, Q, u, R)
        tot = 0.0
        for a, b in zip(br[:-1], br[1:]):
            if b - a < 1e-14:
                continue
            xs = a + (b - a) * np.array([0.25, 0.5, 0.75])
            c2, c1, c0 = np.polyfit(xs, [area(x, u) for x in xs], 2)
            if a == 0.0:
                c0 = area(0.0, u)
            tot += sum(c * _power_integral(a, b, 1 - alpha + k) for k, c in enumerate((c0, c1, c2)) if c)
        return tot

    val, _ = integrate.quad(inner, 0, 2 * np.pi, limit=400, epsabs=1e-13, epsrel=1e-10)
    return val


def as_matrix_from_weights(mesh, W):
    """a_s(phi_i, phi_j) = sum over ordered element pairs of W (g_i(E) - g_i(E')).(g_j(E) - g_j(E'))."""
    nE, nV, d = mesh.nE, mesh.nV, mesh.d
    g = np.zeros((nE, nV, d))
    for E in range(nE):
        for a, v in enumerate(mesh.cells[E]):
            g[E, v] += mesh.grads[E, a]
    A = np.zeros((nV, nV))
    for E in range(nE):
        for F in range(nE):
            if E != F:
                dg = g[E] - g[F]
                A += W[E, F] * dg @ dg.T
    return A


# ---------------------------------------------------------------- plastic return map

def return_map_bruteforce(sigma_dev, c_prev, sig_y, tau, gamma, reg, zooms=60):
    """Minimize sig_y|q| + |q|^2/(2 tau) + reg |c_prev + q|^gamma/gamma - sigma.q over q in R^2.

    Brute force: a polar scan of the disc |q| <= tau |sigma|, then repeated
    Cartesian grids shrinking around the best point. Returns c_prev + q.
    """
    def f(q):
        q = np.atleast_2d(q)
        return (sig_y * np.linalg.norm(q, axis=1) + np.einsum("ni,ni->n", q, q) / (2 * tau)
                + reg * np.linalg.norm(c_prev + q, axis=1) ** gamma / gamma - q @ sigma_dev)

    rmax = tau * np.linalg.norm(sigma_dev) + 1e-12
    Rg, Pg = np.meshgrid(np.linspace(0.0, rmax, 201), np.linspace(0.0, 2 * np.pi, 361)[:-1])
    pts = np.stack([Rg * np.cos(Pg), Rg * np.sin(Pg)], axis=-1).reshape(-1, 2)
    best = pts[np.argmin(f(pts))]
    h = rmax / 100
    g = np.linspace(-1.0, 1.0, 21)
    for _ in range(zooms):
        X, Y = np.meshgrid(best[0] + h * g, best[1] + h * g)
        cand = np.concatenate([np.column_stack([X.ravel(), Y.ravel()]), np.zeros((1, 2))])
        best = cand[np.argmin(f(cand))]
        h *= 0.5
    return c_prev + best


# ---------------------------------------------------------------- scalar damage prox

def golden_section(f, a, b, tol=1e-14):
    """Minimizer of a unimodal f on [a, b]; the bracket shrinks by 1/phi per evaluation."""
    r = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def damage_prox_uniform(z_prev, tau, Y, theta, w0, q, w1, lam_W, delta_C, L):
    """Uniform-field damage update on an interval of length L by golden-section search.

    Minimizes over z in (0, z_prev]
      L * ( -(z - z_prev) + (z - z_prev)^2/(2 tau) + beta(z) - lam_W z_prev z
            + (delta_C + z^2) Y / 2 - theta z ).
    """
    beta = lambda z: w0 * z ** (-q) + w1 * (1 - z) ** 2
    J = lambda z: L * (-(z - z_prev) + (z - z_prev) ** 2 / (2 * tau) + beta(z) - lam_W * z_prev * z
                       + 0.5 * (delta_C + z ** 2) * Y - theta * z)
    zs = golden_section(J, 1e-3, z_prev)
    # the bound itself is a candidate when the constraint is active
    return (z_prev if J(z_prev) <= J(zs) else zs), J


# ---------------------------------------------------------------- single-element chain

def shear_chain(a, mu_C, mu_D, g_C, g_D, sig_y, T_end, dt, t_ramp=1.0):
    """Radial flow rule under prescribed pure shear eps(t) = a s(t) diag(1, -1), s ramp then hold.

    p = r n with n = diag(1, -1)/sqrt(2); returns r(T_end) from an RK45 integration
    with maximal step dt.
    """
    def rhs(t, y):
        r = y[0]
        s, sd = (t / t_ramp, 1.0 / t_ramp) if t < t_ramp else (1.0, 0.0)
        en, end = np.sqrt(2) * a * s, np.sqrt(2) * a * sd
        S = 2 * mu_D * g_D * end + 2 * mu_C * g_C * (en - r)
        return [np.sign(S) * max(abs(S) - sig_y, 0.0) / (1 + 2 * mu_D * g_D)]

    sol = integrate.solve_ivp(rhs, (0.0, T_end), [0.0], max_step=dt, rtol=1e-11, atol=1e-13)
    return sol.y[0, -1]
