"""Material laws: damage-modulated Kelvin-Voigt tensors, thermal expansion,
damage potential, von Mises plasticity with a state-dependent radius and the
temperature-dependent heat conductivity.

All tensors are homogeneous and isotropic. C(z) = (delta_C + z^2) C0 and
D(z) = (delta_D + z^2) D0, with C0, D0 given by Lame pairs.
"""

import hashlib
from dataclasses import dataclass, fields, asdict

import numpy as np

from . import tensors as T


@dataclass(frozen=True)
class MaterialModel:
    d: int = 2
    lam_C: float = 1.0
    mu_C: float = 1.0
    lam_D: float = 0.1
    mu_D: float = 0.1
    delta_C: float = 0.1
    delta_D: float = 0.1
    thermal_expansion: float = 0.1  # E = thermal_expansion * I
    w0: float = 1e-4
    q: float = 0.0  # 0 selects 2d + 1
    w1: float = 1.0
    lam_W: float = 0.0
    c_r: float = 0.5
    C_R: float = 1.0
    constant_yield: float = 0.0  # > 0 replaces the state-dependent radius
    c0: float = 1.0
    mu_kappa: float = 1.5
    rho: float = 1.0
    nu: float = 0.0
    gamma: float = 4.5
    regularize: bool = True

    def __post_init__(self):
        if self.q == 0.0:
            object.__setattr__(self, "q", float(2 * self.d + 1))
        self.check()

    def check(self):
        errs = []
        if self.d not in (1, 2):
            errs.append(f"d = {self.d} not in {{1, 2}}")
        if self.delta_C <= 0 or self.delta_D <= 0:
            errs.append("delta_C and delta_D must be positive")
        for name in ("C", "D"):
            lo, _ = T.isotropic_bounds(getattr(self, "lam_" + name), getattr(self, "mu_" + name), self.d)
            if lo <= 0:
                errs.append(f"{name}0 is not positive definite")
        if self.w0 <= 0:
            errs.append("w0 must be positive")
        if self.q < 2 * self.d + 1:
            errs.append(f"q = {self.q} below 2d+1")
        if self.w1 < 0 or self.lam_W < 0:
            errs.append("w1 and lam_W must be nonnegative")
        if not 0 < self.c_r < self.C_R:
            errs.append("need 0 < c_r < C_R")
        if self.constant_yield and not self.c_r <= self.constant_yield <= self.C_R:
            errs.append("constant_yield must lie in [c_r, C_R]")
        if self.c0 <= 0 or self.mu_kappa <= 1:
            errs.append("need c0 > 0 and mu_kappa > 1")
        if self.rho <= 0 or self.nu < 0:
            errs.append("need rho > 0 and nu >= 0")
        if self.gamma <= 4:
            errs.append("gamma must exceed 4")
        if errs:
            raise ValueError("; ".join(errs))

    def replace(self, **kw):
        vals = asdict(self)
        if "d" in kw and "q" not in kw:
            vals["q"] = 0.0
        vals.update(kw)
        return MaterialModel(**vals)

    def digest(self):
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    # ------------------------------------------------------------ tensors
    @property
    def tau_reg(self):
        return 1.0 if self.regularize else 0.0

    @property
    def C0(self):
        return T.isotropic_mandel(self.lam_C, self.mu_C, self.d)

    @property
    def D0(self):
        return T.isotropic_mandel(self.lam_D, self.mu_D, self.d)

    @property
    def E_mandel(self):
        return self.thermal_expansion * T.mandel_identity(self.d)

    @property
    def E_matrix(self):
        return self.thermal_expansion * np.eye(self.d)

    @property
    def C0E(self):
        return self.C0 @ self.E_mandel

    def g_C(self, z):
        return self.delta_C + np.asarray(z, float) ** 2

    def g_C_prime(self, z):
        return 2.0 * np.asarray(z, float)

    def g_D(self, z):
        return self.delta_D + np.asarray(z, float) ** 2

    def elasticity_apply(self, z, A):
        v = T.to_mandel(A)
        return T.from_mandel(np.asarray(self.g_C(z))[..., None] * (v @ self.C0.T), self.d)

    def viscosity_apply(self, z, A):
        v = T.to_mandel(A)
        return T.from_mandel(np.asarray(self.g_D(z))[..., None] * (v @ self.D0.T), self.d)

    # ------------------------------------------------------------ damage potential
    def damage_potential(self, z):
        """(W, W', beta, beta', lam_W) with W = beta - lam_W z^2 / 2."""
        z = np.asarray(z, float)
        if np.any(z <= 0):
            raise ValueError("damage potential evaluated at z <= 0")
        beta = self.w0 * z ** (-self.q) + self.w1 * (1.0 - z) ** 2
        dbeta = -self.q * self.w0 * z ** (-self.q - 1.0) - 2.0 * self.w1 * (1.0 - z)
        W = beta - 0.5 * self.lam_W * z ** 2
        dW = dbeta - self.lam_W * z
        return W, dW, beta, dbeta, self.lam_W

    def beta_second(self, z):
        z = np.asarray(z, float)
        return self.q * (self.q + 1.0) * self.w0 * z ** (-self.q - 2.0) + 2.0 * self.w1

    # ------------------------------------------------------------ plasticity
    def yield_radius(self, z, theta):
        z = np.asarray(z, float)
        theta = np.asarray(theta, float)
        if self.constant_yield:
            return np.full(np.broadcast(z, theta).shape, float(self.constant_yield))
        zc = np.clip(z, 0.0, 1.0)
        return self.c_r + (self.C_R - self.c_r) * zc / (1.0 + np.maximum(theta, 0.0))

    def dissipation_H(self, z, theta, rate):
        """Support function of the yield ball: sigma_y |rate|."""
        return self.yield_radius(z, theta) * T.norm(rate)

    # ------------------------------------------------------------ heat conduction
    def kappa(self, theta):
        return self.c0 * (1.0 + np.abs(np.asarray(theta, float)) ** self.mu_kappa)

    def kappa_prime(self, theta):
        th = np.asarray(theta, float)
        return self.c0 * self.mu_kappa * np.sign(th) * np.abs(th) ** (self.mu_kappa - 1.0)

    def kappa_M(self, theta, M):
        return self.kappa(truncate(theta, M))

    # ------------------------------------------------------------ derived constants
    def C_bar(self):
        """max over z in [0, 1] of the operator norm of C(z)."""
        return float(self.g_C(1.0)) * T.isotropic_bounds(self.lam_C, self.mu_C, self.d)[1]

    def C_D1(self):
        """Ellipticity constant of D(z) over z in [0, 1]."""
        return float(self.g_D(0.0)) * T.isotropic_bounds(self.lam_D, self.mu_D, self.d)[0]

    def E_norm(self):
        return float(np.linalg.norm(self.E_matrix))

    def C_star(self):
        return positivity_constants(self.C_bar(), self.E_norm(), self.C_D1())

    def theta_bar(self, T_end, theta_star):
        return theta_lower_bound(self.C_star(), T_end, theta_star)

    # ------------------------------------------------------------ sampled checks
    def validate(self, n=200, seed=0):
        """Sampled structural checks; returns a list of (name, passed, detail)."""
        rng = np.random.default_rng(seed)
        d = self.d
        zs = rng.uniform(0.0, 1.1, n)
        A = T.sym_part(rng.normal(size=(n, d, d)))
        a = T.to_mandel(A)
        out = []
        quad = lambda g, M: g * np.einsum("ni,ij,nj->n", a, M, a)
        aa = np.einsum("ni,ni->n", a, a)
        for name, g, M, lam, mu in (("C", self.g_C, self.C0, self.lam_C, self.mu_C),
                                    ("D", self.g_D, self.D0, self.lam_D, self.mu_D)):
            lo, hi = T.isotropic_bounds(lam, mu, d)
            q = quad(g(zs), M)
            ok = np.all(q >= float(g(0.0)) * lo * aa * (1 - 1e-12)) and np.all(q <= float(g(1.1)) * hi * aa * (1 + 1e-12))
            out.append((f"{name}(z) elliptic on [0, 1.1]", bool(ok), f"bounds [{float(g(0.0)) * lo:.4g}, {float(g(1.1)) * hi:.4g}]"))
        h = 1e-4
        fd = (quad(self.g_C(h), self.C0) - quad(self.g_C(-h), self.C0)) / (2 * h)
        out.append(("C'(0) = 0", bool(np.all(np.abs(fd) <= 1e-10 * (1 + aa))), f"max |fd| = {np.abs(fd).max():.2e}"))
        z1, z2 = rng.uniform(0, 1.1, n), rng.uniform(0, 1.1, n)
        mid = quad(self.g_C(0.5 * (z1 + z2)), self.C0)
        avg = 0.5 * (quad(self.g_C(z1), self.C0) + quad(self.g_C(z2), self.C0))
        out.append(("z -> C(z)A:A convex", bool(np.all(mid <= avg + 1e-12 * (1 + avg))), "midpoint test"))
        lhs = self.g_C_prime(z1) * (z1 - z2) * np.einsum("ni,ij,nj->n", a, self.C0, a)
        rhs = quad(self.g_C(z1), self.C0) - quad(self.g_C(z2), self.C0)
        out.append(("C'(z1)(z1-z2)A:A >= C(z1)A:A - C(z2)A:A", bool(np.all(lhs >= rhs - 1e-12 * (1 + np.abs(rhs)))), "sampled"))
        zz = rng.uniform(1e-3, 1.0, n)
        W, _, beta, _, lw = self.damage_potential(zz)
        out.append(("W = beta - lam_W z^2/2", bool(np.all(np.abs(W - beta + 0.5 * lw * zz ** 2) <= 1e-14 * (1 + np.abs(W)))), "sampled"))
        out.append(("W'' >= -lam_W", bool(np.all(self.beta_second(zz) >= 0)), "beta convex"))
        th = rng.uniform(0.0, 100.0, n)
        k = self.kappa(th)
        out.append(("c0(1+theta^mu) <= kappa", bool(np.all(k >= self.c0 * (1 + th ** self.mu_kappa) * (1 - 1e-14))), "sampled"))
        sy = self.yield_radius(zs, th)
        out.append(("c_r <= sigma_y <= C_R", bool(np.all((sy >= self.c_r - 1e-15) & (sy <= self.C_R + 1e-15))), "sampled"))
        out.append(("g_C unbounded on R (operating range only)", True,
                    "C(z) grows like z^2 for |z| large; solutions stay in [0, 1]"))
        return out


def truncate(theta, M):
    return np.clip(theta, -M, M)


def positivity_constants(C_bar, E_norm, C_D1):
    """C* = C_bar^2 |E|^2 / (2 C_D1)."""
    return C_bar ** 2 * E_norm ** 2 / (2.0 * C_D1)


def theta_lower_bound(C_star, T_end, theta_star):
    """(C* T + 1/theta*)^-1."""
    return 1.0 / (C_star * T_end + 1.0 / theta_star)


# ---------------------------------------------------------------- power terms

def power_terms(x, gamma):
    """|x|^g / g, its gradient |x|^(g-2) x and Hessian, batched over rows of x."""
    x = np.asarray(x, float)
    r = np.linalg.norm(x, axis=-1)
    m = x.shape[-1]
    val = r ** gamma / gamma
    grad = (r ** (gamma - 2.0))[..., None] * x
    with np.errstate(invalid="ignore", divide="ignore"):
        xh = np.where(r[..., None] > 0, x / np.where(r > 0, r, 1.0)[..., None], 0.0)
    hess = (r ** (gamma - 2.0))[..., None, None] * (
        np.eye(m) + (gamma - 2.0) * xh[..., :, None] * xh[..., None, :])
    return val, grad, hess


# ---------------------------------------------------------------- local plastic solver

def solve_plastic_local(sig_y, smooth, m, tol=1e-12, maxit=100):
    """Minimize  sig_y |q| + f(q)  over q in R^m, batched over n elements.

    ``smooth(q, idx)`` returns (f, grad f, Hess f) at q for the elements idx.
    f must be strongly convex. Returns (q, zeta, yielded) where zeta = -grad f(q)
    is the selection of sig_y d|q| (exactly sig_y q/|q| on yielded elements).
    """
    sig_y = np.asarray(sig_y, float)
    n = sig_y.shape[0]
    q = np.zeros((n, m))
    zeta = np.zeros((n, m))
    yielded = np.zeros(n, dtype=bool)
    if m == 0 or n == 0:
        return q, zeta, yielded
    allidx = np.arange(n)
    _, g0, H0 = smooth(q, allidx)
    ng0 = np.linalg.norm(g0, axis=1)
    yielded = ng0 > sig_y
    zeta[~yielded] = -g0[~yielded]
    idx = np.flatnonzero(yielded)
    if len(idx) == 0:
        return q, zeta, yielded
    L = np.linalg.eigvalsh(H0[idx])[:, -1]
    qi = -((ng0[idx] - sig_y[idx]) / L / ng0[idx])[:, None] * g0[idx]
    sy = sig_y[idx]
    scale = 1.0 + sy + ng0[idx]

    def phi(qq, ii, sub):
        f, g, H = smooth(qq, ii)
        r = np.linalg.norm(qq, axis=1)
        return sy[sub] * r + f, g, H, r

    active = np.arange(len(idx))
    for it in range(maxit):
        val, g, H, r = phi(qi[active], idx[active], active)
        qh = qi[active] / r[:, None]
        F = sy[active, None] * qh + g
        res = np.linalg.norm(F, axis=1)
        done = res <= (tol if it < 20 else 100.0 * tol) * scale[active]  # relax at the roundoff floor
        active_next = active[~done]
        if len(active_next) == 0:
            break
        keep = ~done
        J = H[keep] + (sy[active_next] / r[keep])[:, None, None] * (
            np.eye(m) - qh[keep][:, :, None] * qh[keep][:, None, :])
        dq = -np.linalg.solve(J, F[keep][..., None])[..., 0]
        t = np.ones(len(active_next))
        v0 = val[keep]
        slope = np.einsum("ni,ni->n", F[keep], dq)
        pending = np.ones(len(active_next), dtype=bool)
        for _ in range(60):
            sub = active_next[pending]
            trial = qi[sub] + t[pending, None] * dq[pending]
            vt, gt, _, rt = phi(trial, idx[sub], sub)
            Ft = np.linalg.norm(sy[sub, None] * trial / np.where(rt > 0, rt, 1.0)[:, None] + gt, axis=1)
            armijo = vt <= v0[pending] + 1e-4 * t[pending] * slope[pending]
            # near the solution the decrease of phi drops below roundoff; the residual still decides
            ok = (armijo | (Ft <= (1 - 1e-4 * t[pending]) * res[keep][pending])) & (rt > 0)
            pi = np.flatnonzero(pending)
            qi[sub[ok]] = trial[ok]
            pending[pi[ok]] = False
            t[pi[~ok]] *= 0.5
            if not pending.any():
                break
        if pending.any():  # tiny steps: accept the full step, the residual test decides
            sub = active_next[pending]
            qi[sub] = qi[sub] + t[pending, None] * dq[pending]
        active = active_next
    else:
        raise RuntimeError(f"plastic local Newton did not converge: max residual {(res / scale[active]).max():.3e}")
    r = np.linalg.norm(qi, axis=1)
    q[idx] = qi
    zeta[idx] = sy[:, None] * qi / r[:, None]
    return q, zeta, yielded


def plastic_return_map(model, sigma_D_trial, p_prev, z, theta_prev, tau):
    """Solve  zeta + (p - p_prev)/tau + tau_reg tau |p|^(g-2) p = sigma_D  with zeta in the
    yield ball of radius sigma_y(z, theta_prev). Batched over leading axes.

    Returns (p_new, zeta) as trace-free matrices.
    """
    d = model.d
    S = np.asarray(sigma_D_trial, float)
    P0 = np.asarray(p_prev, float)
    batch = S.shape[:-2]
    Bd = T.dev_basis(d)
    s = (T.to_mandel(S).reshape(-1, T.nsym(d))) @ Bd
    c_prev = (T.to_mandel(P0).reshape(-1, T.nsym(d))) @ Bd
    n = s.shape[0]
    sy = np.broadcast_to(model.yield_radius(z, theta_prev), batch).reshape(-1) if batch else \
        np.atleast_1d(model.yield_radius(z, theta_prev))
    g = model.gamma
    reg = model.tau_reg * tau

    def smooth(q, ii):
        val, gr, he = power_terms(c_prev[ii] + q, g)
        f = 0.5 * np.einsum("ni,ni->n", q, q) / tau + reg * val - np.einsum("ni,ni->n", s[ii], q)
        grad = q / tau + reg * gr - s[ii]
        hess = np.eye(q.shape[1]) / tau + reg * he
        return f, grad, hess

    q, zeta, yielded = solve_plastic_local(sy, smooth, Bd.shape[1])
    p_new = T.from_mandel((c_prev + q) @ Bd.T, d)
    p_new[~yielded] = P0.reshape(-1, d, d)[~yielded]
    p_new = p_new.reshape(batch + (d, d))
    zeta = T.from_mandel(zeta @ Bd.T, d).reshape(batch + (d, d))
    return p_new, zeta
