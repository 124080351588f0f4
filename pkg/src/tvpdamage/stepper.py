"""Semi-implicit time stepping.

Each step first updates the damage from the previous strain and temperature
(a bound-constrained convex minimization), then solves the coupled
displacement / plastic strain / temperature block with the new damage:

    momentum + plastic flow  (theta frozen: convex incremental energy in u, p)
    heat equation            (Newton in theta, implicit conductivity)

iterated to a fixed point in theta. The heat capacity term is mass-lumped.
Heat sources are assembled once per step as nodal vectors (tested with the
hat functions) and stored on the step record; the energy and entropy audits
sum the very same vectors.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import constitutive as C
from . import fractional as fr
from . import mesh_fem as mf
from . import tensors as T
from .problem import n_steps, check_initial

log = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    pass


@dataclass
class FieldState:
    k: int
    t: float
    u: np.ndarray        # (nV, d)
    u_prev: np.ndarray   # displacement one step earlier (u^{-1} at k = 0)
    e: np.ndarray        # (nE, d, d)
    p: np.ndarray
    z: np.ndarray        # (nV,)
    theta: np.ndarray
    omega: np.ndarray    # dual nodal vector
    zeta: np.ndarray     # (nE, d, d)
    sigma: np.ndarray    # (nE, d, d)

    def copy(self):
        return FieldState(self.k, self.t, *(np.array(getattr(self, n)) for n in
                          ("u", "u_prev", "e", "p", "z", "theta", "omega", "zeta", "sigma")))


@dataclass
class StepRecord:
    k: int
    load: np.ndarray     # L^k over displacement dofs
    w: np.ndarray        # w^k nodal
    G: np.ndarray        # int G^k phi_i
    g: np.ndarray        # int_boundary g^k phi_i
    sources: dict        # heat sources by name, nodal vectors
    stats: dict = field(default_factory=dict)


@dataclass
class DiscreteTrajectory:
    tau: float
    problem: object
    model: C.MaterialModel
    form: fr.FractionalForm
    states: list
    records: list
    w0: np.ndarray

    @property
    def K(self):
        return len(self.states) - 1

    @property
    def mesh(self):
        return self.problem.mesh

    def times(self):
        return np.array([s.t for s in self.states])

    def _index(self, t):
        k = int(np.ceil(t / self.tau - 1e-9))
        return min(max(k, 0), self.K)

    def right(self, t, name):
        """Piecewise constant interpolant taking the value at t^k on (t^{k-1}, t^k]."""
        return getattr(self.states[self._index(t)], name)

    def left(self, t, name):
        """Piecewise constant interpolant taking the value at t^{k-1} on [t^{k-1}, t^k)."""
        k = int(np.floor(t / self.tau + 1e-9))
        return getattr(self.states[min(max(k, 0), self.K)], name)

    def linear(self, t, name):
        k = self._index(t)
        if k == 0:
            return getattr(self.states[0], name)
        a, b = getattr(self.states[k - 1], name), getattr(self.states[k], name)
        lam = (t - (k - 1) * self.tau) / self.tau
        return (1 - lam) * a + lam * b

    def stack(self, name):
        return np.array([getattr(s, name) for s in self.states])


def by_parts(v, h, tau, inner=None):
    """Both sides of the discrete summation-by-parts identity.

    sum_k tau <v^k, (h^k - h^{k-1})/tau>  and
    <v^K, h^K> - <v^0, h^0> - sum_k tau <(v^k - v^{k-1})/tau, h^{k-1}>.
    """
    inner = inner or (lambda a, b: float(np.vdot(a, b)))
    K = len(v) - 1
    lhs = sum(inner(v[k], h[k] - h[k - 1]) for k in range(1, K + 1))
    rhs = inner(v[K], h[K]) - inner(v[0], h[0]) - sum(inner(v[k] - v[k - 1], h[k - 1]) for k in range(1, K + 1))
    return lhs, rhs


# ---------------------------------------------------------------- context

class Context:
    """Per-run constants: mesh operators, model, form, time step."""

    def __init__(self, problem, model, tau, form=None):
        self.problem = problem
        self.model = model
        self.tau = float(tau)
        self.mesh = m = problem.mesh
        if model.d != m.d:
            raise ValueError(f"model dimension {model.d} != mesh dimension {m.d}")
        self.form = form if form is not None else fr.assemble_as(m, problem.s)
        self.M = mf.mass_matrix(m)
        self.ml = mf.lumped_mass(m)
        self.Mv = mf.vector_mass(m)
        self.B = mf.strain_matrix(m)
        self.dofs = mf.element_dofs(m)
        self.free = mf.free_dofs(m)
        self.Bd = T.dev_basis(m.d)
        self.K0 = np.einsum("e,eai,ebi->eab", m.volumes, m.grads, m.grads)  # unit-conductivity element stiffness
        self.nsym = T.nsym(m.d)

    def eps(self, u):
        return np.einsum("esk,ek->es", self.B, u.ravel()[self.dofs])


# ---------------------------------------------------------------- damage step

def damage_functional(ctx, z, z_prev, Y, theta_prev):
    """Incremental damage energy on the feasible set z <= z_prev, z > 0.

    Y holds e^{k-1}:C0 e^{k-1} per element. Returns +inf outside the domain.
    """
    if np.any(z <= 0) or np.any(z > z_prev):
        return np.inf
    mdl, tau = ctx.model, ctx.tau
    A = ctx.form.matrix
    dz = z - z_prev
    _, _, beta, _, lw = mdl.damage_potential(z)
    zb = mf.element_means(ctx.mesh, z)
    return (-ctx.ml @ dz + 0.5 / tau * dz @ ctx.M @ dz + 0.5 * mdl.nu / tau * dz @ A @ dz
            + 0.5 * z @ A @ z + ctx.ml @ beta - lw * ctx.ml @ (z_prev * z)
            + 0.5 * np.sum(ctx.mesh.volumes * mdl.g_C(zb) * Y) - theta_prev @ ctx.M @ z)


def _damage_smooth_grad(ctx, z, z_prev, Y, theta_prev):
    mdl, tau, m = ctx.model, ctx.tau, ctx.mesh
    A = ctx.form.matrix
    dz = z - z_prev
    _, _, _, dbeta, lw = mdl.damage_potential(z)
    zb = mf.element_means(m, z)
    fe = np.repeat((0.5 * m.volumes * mdl.g_C_prime(zb) * Y / (m.d + 1))[:, None], m.d + 1, axis=1)
    return (ctx.M @ dz / tau + mdl.nu / tau * A @ dz + A @ z + ctx.ml * dbeta
            - lw * ctx.ml * z_prev + mf.scatter_vector(m, fe) - ctx.M @ theta_prev)


def _damage_hessian(ctx, z, Y):
    mdl, tau, m = ctx.model, ctx.tau, ctx.mesh
    A = ctx.form.matrix
    n = m.d + 1
    Ke = (m.volumes * Y / n ** 2)[:, None, None] * np.ones((n, n))  # g_C'' = 2, times 1/2
    return ctx.M / tau + (1 + mdl.nu / tau) * A + np.diag(ctx.ml * mdl.beta_second(z)) + mf.scatter_matrix(m, Ke)


def _projected_gradient(ctx, z, z_prev, Y, theta_prev):
    g_s = _damage_smooth_grad(ctx, z, z_prev, Y, theta_prev)
    g = g_s - ctx.ml
    pg = np.where(z >= z_prev, np.maximum(g, 0.0), g)
    return g_s, g, pg


def solve_damage_step(ctx, z_prev, e_prev, theta_prev, tol=1e-12, maxit=200):
    """Projected Newton on the damage functional. Returns (z, omega, stats).

    A step is accepted on sufficient decrease of the functional or, close to
    the solution where that decrease drops below the roundoff of the
    functional value, on decrease of the projected gradient.
    """
    a = T.to_mandel(e_prev)
    Y = np.einsum("ei,ij,ej->e", a, ctx.model.C0, a)
    z = z_prev.copy()
    J = damage_functional(ctx, z, z_prev, Y, theta_prev)
    g_s, g, pg = _projected_gradient(ctx, z, z_prev, Y, theta_prev)
    # magnitude of the summed terms, so the test sits above their roundoff
    scale = (np.abs(ctx.ml).max() + np.abs(g_s).max() + (np.abs(ctx.form.matrix) @ np.abs(z)).max()
             + (np.abs(ctx.M) @ np.abs(theta_prev)).max())
    retries = 0
    for it in range(maxit):
        npg = np.abs(pg).max()
        if npg <= tol * scale:
            break
        at_bound = z >= z_prev
        free = ~(at_bound & (g <= 0))
        H = _damage_hessian(ctx, z, Y)
        dirn = np.zeros_like(z)
        try:
            dirn[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
        except np.linalg.LinAlgError:
            dirn[free] = -g[free]
        if g @ dirn >= 0:
            dirn = -pg
        t = 1.0
        for ls in range(50):
            zt = np.minimum(z + t * dirn, z_prev)
            if np.all(zt > 0):
                Jt = damage_functional(ctx, zt, z_prev, Y, theta_prev)
                if Jt <= J + 1e-4 * g @ (zt - z):
                    break
                if npg <= 1e-6 * scale:
                    trial = _projected_gradient(ctx, zt, z_prev, Y, theta_prev)
                    if np.abs(trial[2]).max() <= (1 - 1e-4 * t) * npg:
                        break
            t *= 0.5
            retries += 1
        else:
            raise StepFailure("damage line search failed after 50 retries")
        z, J = zt, Jt
        g_s, g, pg = _projected_gradient(ctx, z, z_prev, Y, theta_prev)
    else:
        raise StepFailure("damage Newton did not converge")
    omega = -g_s
    return z, omega, {"damage_iters": it, "damage_kkt": float(np.abs(pg).max()), "damage_retries": retries}


def damage_kkt_residual(ctx, z, z_prev, omega):
    """Euler-Lagrange residual measure: omega must equal -ml off the bound and be >= -ml on it."""
    ml = ctx.ml
    at_bound = z >= z_prev
    r = np.where(at_bound, np.minimum(omega + ml, 0.0), omega + ml)
    return float(np.abs(r).max())


# ---------------------------------------------------------------- mechanics

class _Mechanics:
    """Incremental energy in (u, p) for frozen damage and temperature."""

    def __init__(self, ctx, prev, z, theta_el, theta_prev_el, data):
        self.ctx = ctx
        mdl, tau = ctx.model, ctx.tau
        m = ctx.mesh
        zb = mf.element_means(m, z)
        self.gC = mdl.g_C(zb)
        self.gD = mdl.g_D(zb)
        self.gCp = mdl.g_C(np.maximum(zb, 0.0))
        self.sy = mdl.yield_radius(zb, theta_prev_el)
        self.th_stress = (theta_el * self.gCp)[:, None] * mdl.C0E  # theta C(z+) E
        self.e_prev = T.to_mandel(prev.e)
        self.c_prev = T.to_mandel(prev.p) @ ctx.Bd
        self.reg = mdl.tau_reg * tau
        self.data = data
        self.u1, self.u2 = prev.u, prev.u_prev
        self.inertia = mdl.rho / tau ** 2

    def stress(self, e):
        return _Sub(self, slice(None)).stress(e)

    def elastic_energy(self, e):
        return _Sub(self, slice(None)).energy(e)

    def tangent_e(self, e):
        return _Sub(self, slice(None)).tangent(e)

    def local(self, eps):
        """Plastic solve per element: returns phi, sigma, algebraic tangent, c, zeta, yielded."""
        ctx, mdl, tau = self.ctx, self.ctx.model, self.ctx.tau
        Bd = ctx.Bd
        ndev = Bd.shape[1]

        def smooth(q, ii):
            c = self.c_prev[ii] + q
            e = eps[ii] - c @ Bd.T
            sub = _Sub(self, ii)
            val, gr, he = C.power_terms(c, mdl.gamma)
            f = sub.energy(e) + 0.5 * np.einsum("ni,ni->n", q, q) / tau + self.reg * val
            grad = -sub.stress(e) @ Bd + q / tau + self.reg * gr
            hess = Bd.T @ sub.tangent(e) @ Bd + np.eye(ndev) / tau + self.reg * he
            return f, grad, hess

        q, zeta_c, yielded = C.solve_plastic_local(self.sy, smooth, ndev)
        c = self.c_prev + q
        c[~yielded] = self.c_prev[~yielded]
        e = eps - c @ Bd.T
        val, _, _ = C.power_terms(c, mdl.gamma)
        phi = (self.elastic_energy(e) + 0.5 * np.einsum("ni,ni->n", q, q) / tau + self.reg * val
               + self.sy * np.linalg.norm(q, axis=1))
        sig = self.stress(e)
        Ct = self.tangent_e(e)
        Calg = Ct.copy()
        if ndev and yielded.any():
            y = yielded
            r = np.linalg.norm(q[y], axis=1)
            qh = q[y] / r[:, None]
            _, _, hc = C.power_terms(c[y], mdl.gamma)
            Jcc = (Bd.T @ Ct[y] @ Bd + np.eye(ndev) / tau + self.reg * hc
                   + (self.sy[y] / r)[:, None, None] * (np.eye(ndev) - qh[:, :, None] * qh[:, None, :]))
            CB = Ct[y] @ Bd
            Calg[y] = Ct[y] - CB @ np.linalg.solve(Jcc, np.swapaxes(CB, 1, 2))
        return phi, sig, Calg, c, e, zeta_c, yielded

    def total(self, u, phi):
        du = (u - 2 * self.u1 + self.u2).ravel()
        return (0.5 * self.inertia * du @ self.ctx.Mv @ du - self.data["load"] @ u.ravel()
                + np.sum(self.ctx.mesh.volumes * phi))

    def solve(self, u_guess, tol=1e-11, maxit=60):
        ctx = self.ctx
        m = ctx.mesh
        free = ctx.free
        u = u_guess.copy()
        dn = m.dirichlet_nodes
        u[dn] = self.data["w"][dn]
        vol = m.volumes
        force_scale = (np.abs(self.data["load"]).max()
                       + np.abs(self.inertia * ctx.Mv @ (self.u1 - self.u2).ravel()).max())
        out = self.local(ctx.eps(u))
        Pi = self.total(u, out[0])
        for it in range(maxit):
            phi, sig, Calg, c, e, zeta_c, yielded = out
            du = (u - 2 * self.u1 + self.u2).ravel()
            fe = np.einsum("e,esk,es->ek", vol, ctx.B, sig)
            r = self.inertia * ctx.Mv @ du - self.data["load"] + mf.scatter_vector(m, fe, ctx.dofs, u.size)
            scale = 1.0 + force_scale + np.abs(mf.scatter_vector(m, np.abs(fe), ctx.dofs, u.size)).max()
            if not free.any() or np.abs(r[free]).max() <= tol * scale:
                break
            Ke = np.einsum("e,esk,est,etl->ekl", vol, ctx.B, Calg, ctx.B)
            H = self.inertia * ctx.Mv + mf.scatter_matrix(m, Ke, ctx.dofs, u.size)
            step = np.zeros(u.size)
            step[free] = -np.linalg.solve(H[np.ix_(free, free)], r[free])
            slope = r @ step
            t = 1.0
            for _ in range(40):
                ut = u + t * step.reshape(u.shape)
                out_t = self.local(ctx.eps(ut))
                Pt = self.total(ut, out_t[0])
                if Pt <= Pi + 1e-4 * t * slope + 1e-14 * (abs(Pi) + 1.0):
                    break
                t *= 0.5
            u, out, Pi = ut, out_t, Pt
        else:
            raise StepFailure("mechanics Newton did not converge")
        phi, sig, Calg, c, e, zeta_c, yielded = out
        Bd = ctx.Bd
        res = float(np.abs(r[free]).max() / scale) if free.any() else 0.0
        return dict(u=u, e=e, c=c, sigma=sig, zeta=zeta_c @ Bd.T, yielded=yielded, iters=it, residual=res)


class _Sub:
    """Restriction of a _Mechanics element set to indices ii."""

    def __init__(self, mech, ii):
        self.m, self.ii = mech, ii

    def stress(self, e):
        mech, ii, mdl = self.m, self.ii, self.m.ctx.model
        _, gr, _ = C.power_terms(e, mdl.gamma)
        return ((mech.gD[ii] / mech.ctx.tau)[:, None] * ((e - mech.e_prev[ii]) @ mdl.D0)
                + mech.gC[ii][:, None] * (e @ mdl.C0) + mech.reg * gr - mech.th_stress[ii])

    def energy(self, e):
        mech, ii, mdl = self.m, self.ii, self.m.ctx.model
        de = e - mech.e_prev[ii]
        val, _, _ = C.power_terms(e, mdl.gamma)
        return (0.5 * mech.gD[ii] / mech.ctx.tau * np.einsum("ei,ij,ej->e", de, mdl.D0, de)
                + 0.5 * mech.gC[ii] * np.einsum("ei,ij,ej->e", e, mdl.C0, e) + mech.reg * val
                - np.einsum("ei,ei->e", mech.th_stress[ii], e))

    def tangent(self, e):
        mech, ii, mdl = self.m, self.ii, self.m.ctx.model
        _, _, he = C.power_terms(e, mdl.gamma)
        return ((mech.gD[ii] / mech.ctx.tau)[:, None, None] * mdl.D0 + mech.gC[ii][:, None, None] * mdl.C0
                + mech.reg * he)


# ---------------------------------------------------------------- heat sources

def heat_sources(ctx, prev, z, e, p, theta, theta_prev_el=None):
    """Nodal heat source vectors  int (source) phi_i  of the discrete heat equation.

    'thermo' carries the coupling -theta^k C(z+)E : (e - e_prev)/tau and is the
    only entry depending on theta^k.
    """
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    zb = mf.element_means(m, z)
    de = (T.to_mandel(e) - T.to_mandel(prev.e)) / tau
    dp = (p - prev.p) / tau
    dz = (z - prev.z) / tau
    if theta_prev_el is None:
        theta_prev_el = mf.element_means(m, prev.theta)
    A = ctx.form.matrix
    out = {}
    out["visc"] = mf.element_source(m, mdl.g_D(zb) * np.einsum("ei,ij,ej->e", de, mdl.D0, de))
    out["rate_R"] = -(ctx.M @ dz)
    out["rate_sq"] = mf.triple_product(m, dz, dz)
    out["rate_as"] = (mdl.nu / m.measure) * float(dz @ A @ dz) * ctx.ml
    out["theta_dz"] = -mf.triple_product(m, prev.theta, dz)
    out["plast_H"] = mf.element_source(m, mdl.yield_radius(zb, theta_prev_el) * T.norm(dp))
    out["plast_sq"] = mf.element_source(m, T.frobenius(dp, dp))
    out["thermo"] = -(thermo_matrix(ctx, z, e, prev.e) @ theta)
    return out


def thermo_matrix(ctx, z, e, e_prev):
    """Exact P1 mass matrix weighted by C(z+)E:(e - e_prev)/tau."""
    m, mdl = ctx.mesh, ctx.model
    zb = mf.element_means(m, z)
    de = (T.to_mandel(e) - T.to_mandel(e_prev)) / ctx.tau
    return mf.weighted_mass(m, mdl.g_C(np.maximum(zb, 0.0)) * (de @ mdl.C0E))


# ---------------------------------------------------------------- heat solve

def conductivity_matrix(ctx, theta_el):
    """Stiffness with kappa evaluated at the element barycenter values theta_el."""
    return mf.scatter_matrix(ctx.mesh, ctx.model.kappa(theta_el)[:, None, None] * ctx.K0)


def solve_heat(ctx, theta_prev, b_fixed, Wc, gvec, M=None, tol=1e-12, maxit=60):
    """Newton for  ml (th - th_prev)/tau + K(th) th + Wc T_M(th) = b_fixed + gvec."""
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    ml = ctx.ml
    trunc = (lambda x: x) if M is None else (lambda x: C.truncate(x, M))
    dtrunc = (lambda x: np.ones_like(x)) if M is None else (lambda x: (np.abs(x) <= M).astype(float))
    th = theta_prev.copy()
    rhs = b_fixed + gvec
    scale = np.abs(ml * theta_prev / tau).max() + np.abs(rhs).max() + 1e-300
    n = m.d + 1

    def residual(th):
        tb = mf.element_means(m, th)
        K = conductivity_matrix(ctx, trunc(tb))
        return ml * (th - theta_prev) / tau + K @ th + Wc @ trunc(th) - rhs, K, tb

    R, K, tb = residual(th)
    for it in range(maxit):
        if not np.all(np.isfinite(R)):
            raise StepFailure("non-finite heat residual")
        if np.abs(R).max() <= tol * scale:
            break
        dk = mdl.kappa_prime(trunc(tb)) * dtrunc(tb) / n
        Kth = np.einsum("eab,eb->ea", ctx.K0, th[m.cells])  # unit-conductivity element action
        Je = (dk[:, None, None] * Kth[:, :, None]) * np.ones((1, 1, n))
        J = np.diag(ml / tau) + K + mf.scatter_matrix(m, Je) + Wc * dtrunc(th)[None, :]
        step = -np.linalg.solve(J, R)
        t, nR = 1.0, np.linalg.norm(R)
        for _ in range(30):
            Rt, Kt, tbt = residual(th + t * step)
            if np.all(np.isfinite(Rt)) and np.linalg.norm(Rt) <= (1 - 1e-4 * t) * nR:
                break
            t *= 0.5
        th = th + t * step
        R, K, tb = Rt, Kt, tbt
    else:
        raise StepFailure("heat Newton did not converge")
    return th, it


# ---------------------------------------------------------------- coupled block

def step_data(ctx, k):
    """Local means of the data on (t^{k-1}, t^k] assembled as vectors."""
    pr, m, tau = ctx.problem, ctx.mesh, ctx.tau
    a, b = (k - 1) * tau, k * tau
    load = mf.body_force_vector(m, pr.F.mean(a, b)) + mf.traction_vector(m, pr.f.mean(a, b))
    return dict(load=load, w=pr.w_mean(a, b),
                G=float(pr.G.mean(a, b)) * ctx.ml,
                g=mf.boundary_flux_vector(m, float(pr.g.mean(a, b))))


def solve_coupled_step(ctx, prev, z, data, M=None, max_fp=200, fp_tol=1e-13):
    """Fixed point in theta around the mechanics and heat blocks.

    Returns a dict with u, e, p, theta, zeta, sigma and diagnostics.
    """
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    Bd = ctx.Bd
    theta_prev_el = mf.element_means(m, prev.theta)
    trunc = (lambda x: x) if M is None else (lambda x: C.truncate(x, M))
    th = prev.theta.copy()
    u_guess = prev.u.copy()
    heat_iters = 0
    for it in range(max_fp):
        mech = _Mechanics(ctx, prev, z, mf.element_means(m, trunc(th)), theta_prev_el, data)
        res = mech.solve(u_guess)
        u_guess = res["u"]
        e = T.from_mandel(res["e"], m.d)
        p = T.from_mandel(res["c"] @ Bd.T, m.d)
        p[~res["yielded"]] = prev.p[~res["yielded"]]
        src = heat_sources(ctx, prev, z, e, p, th, theta_prev_el)
        b_fixed = data["G"] + sum(v for k, v in src.items() if k != "thermo")
        Wc = thermo_matrix(ctx, z, e, prev.e)
        th_new, hi = solve_heat(ctx, prev.theta, b_fixed, Wc, data["g"], M=M)
        heat_iters += hi
        diff = np.abs(th_new - th).max()
        th = th_new
        if not np.all(np.isfinite(th)):
            raise StepFailure("non-finite temperature")
        if diff <= fp_tol * (1.0 + np.abs(th).max()):
            break
    else:
        raise StepFailure(f"theta fixed point did not converge (last change {diff:.3e})")
    if M is not None and np.abs(th).max() > M:
        raise StepFailure(f"truncation active at the solution (max |theta| = {np.abs(th).max():.4g} > M = {M})")
    src = heat_sources(ctx, prev, z, e, p, th, theta_prev_el)
    return dict(u=res["u"], e=e, p=p, theta=th, zeta=T.from_mandel(res["zeta"], m.d),
                sigma=T.from_mandel(res["sigma"], m.d), sources=src, yielded=res["yielded"],
                stats={"fp_iters": it + 1, "mech_iters": res["iters"], "mech_residual": res["residual"],
                       "heat_iters": heat_iters, "M": M})


def solve_prescribed_step(ctx, prev, z, data, theta):
    """Mechanics with the temperature injected from a prescribed field."""
    m = ctx.mesh
    Bd = ctx.Bd
    mech = _Mechanics(ctx, prev, z, mf.element_means(m, theta), mf.element_means(m, prev.theta), data)
    res = mech.solve(prev.u.copy())
    e = T.from_mandel(res["e"], m.d)
    p = T.from_mandel(res["c"] @ Bd.T, m.d)
    p[~res["yielded"]] = prev.p[~res["yielded"]]
    src = heat_sources(ctx, prev, z, e, p, theta)
    return dict(u=res["u"], e=e, p=p, theta=theta, zeta=T.from_mandel(res["zeta"], m.d),
                sigma=T.from_mandel(res["sigma"], m.d), sources=src, yielded=res["yielded"],
                stats={"fp_iters": 0, "mech_iters": res["iters"], "mech_residual": res["residual"],
                       "heat_iters": 0, "M": None})


def advance(ctx, prev, k, M0=None, max_doublings=12):
    """One full step: damage, then the coupled block (with truncation retries)."""
    pr, tau = ctx.problem, ctx.tau
    data = step_data(ctx, k)
    z, omega, dstats = solve_damage_step(ctx, prev.z, prev.e, prev.theta)
    if not pr.heat_enabled:
        theta = pr.theta_prescribed_mean((k - 1) * tau, k * tau)
        out = solve_prescribed_step(ctx, prev, z, data, theta)
    else:
        try:
            out = solve_coupled_step(ctx, prev, z, data)
        except (StepFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
            M = M0 or max(2.0, 2.0 * np.abs(prev.theta).max())
            log.info("step %d: untruncated solve failed (%s); retrying with truncation", k, exc)
            for _ in range(max_doublings):
                try:
                    out = solve_coupled_step(ctx, prev, z, data, M=M)
                    break
                except (StepFailure, np.linalg.LinAlgError, FloatingPointError):
                    M *= 2.0
            else:
                raise StepFailure(f"step {k}: no convergence up to truncation level {M}")
    state = FieldState(k, k * tau, out["u"], prev.u.copy(), out["e"], out["p"], z, out["theta"],
                       omega, out["zeta"], out["sigma"])
    stats = dict(dstats, **out["stats"], yielded=int(np.sum(out["yielded"])))
    rec = StepRecord(k, data["load"], data["w"], data["G"], data["g"], out["sources"], stats)
    return state, rec


def initial_state(ctx):
    pr = ctx.problem
    m = ctx.mesh
    d = m.d
    theta0 = pr.theta0 if pr.heat_enabled else pr.theta_prescribed_at(0.0)
    u0 = np.asarray(pr.u0, float).reshape(m.nV, d)
    return FieldState(0, 0.0, u0.copy(), u0 - ctx.tau * np.asarray(pr.v0, float).reshape(m.nV, d),
                      np.array(pr.e0, float), np.array(pr.p0, float), np.array(pr.z0, float),
                      np.array(theta0, float), np.zeros(m.nV), np.zeros((m.nE, d, d)), np.zeros((m.nE, d, d)))


def run(problem, model, tau, form=None, on_step=None):
    """Advance the scheme over [0, T]. On failure the partial trajectory is attached
    to the raised StepFailure as ``exc.trajectory``."""
    check_initial(problem)
    K = n_steps(problem.T, tau)
    ctx = Context(problem, model, tau, form)
    state = initial_state(ctx)
    traj = DiscreteTrajectory(ctx.tau, problem, model, ctx.form, [state], [], problem.w_at(0.0))
    for k in range(1, K + 1):
        try:
            state, rec = advance(ctx, state, k)
        except StepFailure as exc:
            exc.trajectory = traj
            raise
        traj.states.append(state)
        traj.records.append(rec)
        if on_step is not None:
            on_step(traj)
    return traj
