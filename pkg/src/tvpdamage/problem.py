"""Time profiles, space-time data and the problem description."""

from dataclasses import dataclass, field

import numpy as np

from . import mesh_fem as mf


@dataclass(frozen=True)
class Profile:
    """Piecewise linear scalar function of time.

    kind 'constant': value; 'ramp': v0 -> v1 on [t0, t1], held outside;
    'table': linear interpolation of (times, values), held outside.
    """
    kind: str = "constant"
    value: float = 1.0
    t0: float = 0.0
    t1: float = 1.0
    v0: float = 0.0
    v1: float = 1.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "ramp", "table"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "ramp" and not self.t1 > self.t0:
            raise ValueError("ramp needs t1 > t0")
        if self.kind == "table":
            t = np.asarray(self.times, float)
            if len(t) < 2 or len(t) != len(self.values) or np.any(np.diff(t) <= 0):
                raise ValueError("table needs >= 2 strictly increasing times with matching values")

    def knots(self):
        if self.kind == "constant":
            return np.array([0.0]), np.array([self.value])
        if self.kind == "ramp":
            return np.array([self.t0, self.t1]), np.array([self.v0, self.v1])
        return np.asarray(self.times, float), np.asarray(self.values, float)

    def __call__(self, t):
        tk, vk = self.knots()
        if len(tk) == 1:
            return np.full(np.shape(t), vk[0]) if np.ndim(t) else float(vk[0])
        return np.interp(t, tk, vk)

    def mean(self, a, b):
        """(1/(b-a)) int_a^b, exact for the piecewise linear profile."""
        if self.kind == "constant":
            return float(self.value)
        tk, _ = self.knots()
        pts = np.concatenate([[a], tk[(tk > a) & (tk < b)], [b]])
        vals = self(pts)
        return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)) / (b - a))


def local_means(profile, tau, T):
    """Per-step averages over (t^{k-1}, t^k], k = 1..K."""
    K = n_steps(T, tau)
    return np.array([profile.mean((k - 1) * tau, k * tau) for k in range(1, K + 1)])


def sampled_means(times, values, tau, T):
    """Local means of a sampled series by the trapezoid rule on the samples."""
    return local_means(Profile("table", times=tuple(times), values=tuple(values)), tau, T)


def n_steps(T, tau):
    K = int(round(T / tau))
    if K < 1 or abs(K * tau - T) > 1e-9 * T:
        raise ValueError(f"T = {T} is not an integer multiple of tau = {tau}")
    return K


@dataclass(frozen=True)
class Term:
    """Space-time datum  amplitude(x) * profile(t)."""
    amplitude: object
    profile: Profile = Profile()

    def at(self, t):
        return np.asarray(self.amplitude, float) * self.profile(t)

    def mean(self, a, b):
        return np.asarray(self.amplitude, float) * self.profile.mean(a, b)


def zero_term(shape=()):
    return Term(np.zeros(shape), Profile("constant", value=0.0))


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Mesh, horizon, loads, Dirichlet datum and Cauchy data.

    F (body force) and f (Neumann traction) are spatially constant vectors,
    G (heat source) and g (boundary heat flux) spatially constant scalars.
    The Dirichlet datum is affine in space: w(x, t) = profile(t) (W x + b),
    extended into the interior by the same formula.
    """
    mesh: mf.Mesh
    T: float
    s: float
    F: Term
    f: Term
    G: Term
    g: Term
    w_grad: np.ndarray
    w_shift: np.ndarray
    w_profile: Profile
    u0: np.ndarray
    v0: np.ndarray
    e0: np.ndarray
    p0: np.ndarray
    z0: np.ndarray
    theta0: np.ndarray
    prescribed_theta: tuple = ()  # Terms summed into Theta(x, t); nonempty disables the heat solve
    label: str = ""
    extra: dict = field(default_factory=dict)

    def w_field(self, factor):
        x = self.mesh.vertices
        return factor * (x @ np.asarray(self.w_grad, float).T + np.asarray(self.w_shift, float))

    def w_at(self, t):
        return self.w_field(self.w_profile(t))

    def w_mean(self, a, b):
        return self.w_field(self.w_profile.mean(a, b))

    def theta_prescribed_at(self, t):
        return sum(term.at(t) for term in self.prescribed_theta)

    def theta_prescribed_mean(self, a, b):
        return sum(term.mean(a, b) for term in self.prescribed_theta)

    @property
    def heat_enabled(self):
        return not self.prescribed_theta

    def replace(self, **kw):
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return ProblemData(**vals)


def default_initial(mesh, w_grad, w_shift, w0_factor, z0=1.0, theta0=1.0, v0=None, p0=None):
    """Cauchy data consistent with the datum: u0 = w(0), p0 given (default 0), e0 = eps(u0) - p0."""
    d = mesh.d
    x = mesh.vertices
    u0 = w0_factor * (x @ np.asarray(w_grad, float).T + np.asarray(w_shift, float))
    eps = mf.strain(mesh, u0)
    p0 = np.zeros((mesh.nE, d, d)) if p0 is None else np.broadcast_to(p0, (mesh.nE, d, d)).copy()
    e0 = eps - p0
    v0 = np.zeros((mesh.nV, d)) if v0 is None else np.broadcast_to(v0, (mesh.nV, d)).copy()
    return dict(u0=u0, v0=v0, e0=e0, p0=p0,
                z0=np.broadcast_to(np.asarray(z0, float), (mesh.nV,)).copy(),
                theta0=np.broadcast_to(np.asarray(theta0, float), (mesh.nV,)).copy())


def check_initial(problem, tol=1e-10):
    """Preconditions on the Cauchy data; raises ValueError with the first violation."""
    m = problem.mesh
    d = m.d
    if problem.T <= 0:
        raise ValueError("time horizon must be positive")
    if np.any(problem.z0 > 1.0):
        raise ValueError(f"initial damage exceeds 1 (max z0 = {problem.z0.max():.6g})")
    if np.any(problem.z0 <= 0.0):
        raise ValueError("initial damage must be positive")
    if problem.heat_enabled and np.any(problem.theta0 <= 0.0):
        raise ValueError("initial temperature must be positive")
    dn = m.dirichlet_nodes
    if np.any(np.abs(problem.u0[dn] - problem.w_at(0.0)[dn]) > tol * (1 + np.abs(problem.u0).max())):
        raise ValueError("u0 does not match the Dirichlet datum at t = 0")
    res = mf.strain(m, problem.u0) - problem.e0 - problem.p0
    if np.abs(res).max() > tol * (1 + np.abs(problem.e0).max() + np.abs(problem.p0).max()):
        raise ValueError("initial data not kinematically admissible: eps(u0) != e0 + p0")
    tr = np.abs(np.trace(problem.p0, axis1=1, axis2=2))
    if d > 1 and tr.max() > 1e-12 * (1 + np.abs(problem.p0).max()):
        raise ValueError("initial plastic strain is not trace-free")
    if d == 1 and np.abs(problem.p0).max() > 0:
        raise ValueError("plastic strain must vanish in d = 1")
