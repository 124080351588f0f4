"""Continuous dependence on the data with a prescribed temperature.

Two runs of the stepper with the heat solve replaced by a given Theta and a
state-independent yield radius. The distance between the two solutions is
measured in the discrete counterparts of

    u in W^{1,inf}(L2) and H^1(H^1), e and p in H^1(L2), z in H^1(H^s)

and compared with the distance between the data (initial values, loads,
Dirichlet datum, Theta). Time integrals use the step rule, H^s is the L2 norm
plus the assembled nonlocal form.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import mesh_fem as mf
from . import stepper as S
from .problem import Profile, ProblemData, Term, default_initial

DIRECTIONS = ("v0", "e0_p0", "z0", "load", "w", "theta")
EPSILONS = (1e-2, 1e-3, 1e-4)


@dataclass
class PerturbationPair:
    first: ProblemData
    second: ProblemData
    label: str = ""
    eps: float = 0.0

    def check(self, model):
        if not model.constant_yield:
            raise ValueError("continuous dependence needs a constant yield radius")
        if model.nu <= 0:
            raise ValueError("continuous dependence needs nu > 0")
        for pr in (self.first, self.second):
            if pr.heat_enabled:
                raise ValueError("continuous dependence needs a prescribed temperature")
        if self.first.mesh is not self.second.mesh:
            raise ValueError("pair must share the mesh")


def base_problem(divisions=(2, 2), T_end=0.5):
    """Small tension problem with a time-ramped prescribed temperature."""
    m = mf.build_mesh([1.0] * len(divisions), list(divisions), ["left", "right"])
    d = m.d
    Wg = np.zeros((d, d))
    Wg[0, 0] = 1.0
    b = np.zeros(d)
    init = default_initial(m, Wg, b, 0.0, z0=0.9, theta0=1.0)
    zero_v = Term(np.zeros(d), Profile("constant", value=0.0))
    zero_s = Term(0.0, Profile("constant", value=0.0))
    theta = (Term(np.full(m.nV, 0.5), Profile("ramp", t0=0.0, t1=T_end, v0=1.0, v1=1.5)),)
    return ProblemData(m, T_end, 1.25 if d == 2 else 1.1, Term(np.array([0.0] * (d - 1) + [-0.1]) if d > 1
                       else np.array([0.1])), zero_v, zero_s, zero_s, Wg, b,
                       Profile("ramp", t0=0.0, t1=T_end, v0=0.0, v1=0.4), prescribed_theta=theta,
                       label="contdep_base", **init)


def _bump(mesh):
    """Smooth nodal field vanishing on the Dirichlet nodes."""
    x = mesh.vertices
    f = np.prod(np.sin(np.pi * (x - x.min(axis=0)) / np.ptp(x, axis=0)), axis=1)
    f[mesh.dirichlet_nodes] = 0.0
    return f


def perturb(problem, direction, eps):
    """Copy of problem with a single datum moved by eps."""
    m = problem.mesh
    d = m.d
    bump = _bump(m)
    if direction == "v0":
        v = problem.v0 + eps * bump[:, None] * np.ones(d)
        return problem.replace(v0=v)
    if direction == "e0_p0":
        if d == 1:
            raise ValueError("no plastic strain in d = 1")
        P = np.zeros((d, d))
        P[0, 0], P[1, 1], P[0, 1], P[1, 0] = 1.0, -1.0, 0.5, 0.5
        shape = np.linspace(0.5, 1.5, m.nE)[:, None, None]
        return problem.replace(p0=problem.p0 + eps * shape * P, e0=problem.e0 - eps * shape * P)
    if direction == "z0":
        return problem.replace(z0=problem.z0 - eps * (0.5 + 0.5 * bump))
    if direction == "load":
        amp = np.asarray(problem.F.amplitude, float) + eps * np.ones(d)
        return problem.replace(F=Term(amp, problem.F.profile))
    if direction == "w":
        Wg = np.array(problem.w_grad, float)
        Wg[0, 0] += eps
        if np.any(problem.w_profile(0.0) != 0.0):
            raise ValueError("w perturbation assumes w(0) = 0")
        return problem.replace(w_grad=Wg)
    if direction == "theta":
        extra = Term(np.full(m.nV, eps), Profile("constant", value=1.0))
        return problem.replace(prescribed_theta=tuple(problem.prescribed_theta) + (extra,))
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------- norms

def _h1t(seq, dt, norm):
    """Discrete H^1(0,T;X): sqrt(sum tau (|y^k|^2 + |(y^k - y^{k-1})/tau|^2)), k = 1..K."""
    K = len(seq) - 1
    return float(np.sqrt(sum(dt * (norm(seq[k]) ** 2 + norm((seq[k] - seq[k - 1]) / dt) ** 2)
                             for k in range(1, K + 1))))


def _hs(form, mesh):
    M = mf.mass_matrix(mesh)
    return lambda z: float(np.sqrt(max(z @ M @ z + z @ form.matrix @ z, 0.0)))


def solution_distance(t1, t2):
    m, tau = t1.mesh, t1.tau
    du = [a.u - b.u for a, b in zip(t1.states, t2.states)]
    du_prev = [a.u_prev - b.u_prev for a, b in zip(t1.states, t2.states)]
    dv = [(x - y) / tau for x, y in zip(du, du_prev)]
    l2 = lambda v: mf.l2_norm(m, v)
    parts = {
        "u_W1inf_L2": max(l2(x) for x in du) + max(l2(v) for v in dv),
        "u_H1_H1": _h1t(du, tau, lambda v: mf.h1_norm(m, v)),
        "e_H1_L2": _h1t([a.e - b.e for a, b in zip(t1.states, t2.states)], tau,
                        lambda A: mf.element_l2_norm(m, A)),
        "z_H1_Hs": _h1t([a.z - b.z for a, b in zip(t1.states, t2.states)], tau, _hs(t1.form, m)),
        "p_H1_L2": _h1t([a.p - b.p for a, b in zip(t1.states, t2.states)], tau,
                        lambda A: mf.element_l2_norm(m, A)),
    }
    return sum(parts.values()), parts


def _dual_norm(mesh):
    """Norm of a load vector in the dual of H^1 fields vanishing on the Dirichlet part."""
    G = np.kron(mf.h1_gram(mesh), np.eye(mesh.d))
    free = mf.free_dofs(mesh)
    Gi = np.linalg.inv(G[np.ix_(free, free)])
    return lambda r: float(np.sqrt(max(r[free] @ Gi @ r[free], 0.0)))


def data_distance(p1, p2, tau, form):
    m = p1.mesh
    K = int(round(p1.T / tau))
    parts = {
        "u0_H1": mf.h1_norm(m, p1.u0 - p2.u0),
        "v0_L2": mf.l2_norm(m, p1.v0 - p2.v0),
        "e0_L2": mf.element_l2_norm(m, p1.e0 - p2.e0),
        "p0_L2": mf.element_l2_norm(m, p1.p0 - p2.p0),
        "z0_Hs": _hs(form, m)(p1.z0 - p2.z0),
    }
    dual = _dual_norm(m)
    loads = []
    for k in range(1, K + 1):
        a, b = (k - 1) * tau, k * tau
        L1 = mf.body_force_vector(m, p1.F.mean(a, b)) + mf.traction_vector(m, p1.f.mean(a, b))
        L2 = mf.body_force_vector(m, p2.F.mean(a, b)) + mf.traction_vector(m, p2.f.mean(a, b))
        loads.append(dual(L1 - L2))
    parts["load_L2_dual"] = float(np.sqrt(tau * np.sum(np.square(loads))))
    dw = [p1.w_at(0.0) - p2.w_at(0.0)] + [p1.w_mean((k - 1) * tau, k * tau) - p2.w_mean((k - 1) * tau, k * tau)
                                          for k in range(1, K + 1)]
    dwd = [(dw[k] - dw[k - 1]) / tau for k in range(1, K + 1)]
    dwdd = [(dwd[k] - dwd[k - 1]) / tau for k in range(1, K)]
    l2 = lambda v: mf.l2_norm(m, v)
    parts["w_H1_H1"] = _h1t(dw, tau, lambda v: mf.h1_norm(m, v))
    parts["w_W21_L2"] = float(tau * (sum(l2(v) for v in dw[1:]) + sum(l2(v) for v in dwd)
                                     + sum(l2(v) for v in dwdd)))
    th = [p1.theta_prescribed_mean((k - 1) * tau, k * tau) - p2.theta_prescribed_mean((k - 1) * tau, k * tau)
          for k in range(1, K + 1)]
    parts["theta_L2_L2"] = float(np.sqrt(tau * sum(l2(v) ** 2 for v in th)))
    return parts


# ---------------------------------------------------------------- runs

@dataclass
class PairResult:
    label: str
    eps: float
    lhs: float
    rhs: float
    ratio: float
    P: float
    lhs_parts: dict
    rhs_parts: dict


def _P(traj):
    m = traj.mesh
    return max(mf.element_l2_norm(m, s.e) for s in traj.states) + max(float(np.abs(s.z).max()) for s in traj.states)


def compare(t1, t2, pair):
    lhs, lparts = solution_distance(t1, t2)
    rparts = data_distance(pair.first, pair.second, t1.tau, t1.form)
    rhs = float(sum(rparts.values()))
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))
    return PairResult(pair.label, pair.eps, lhs, rhs, ratio, max(_P(t1), _P(t2)), lparts, rparts)


def run_pair(pair, model, tau, form=None, workers=2):
    """Run both members (concurrently) and return (PairResult, traj1, traj2)."""
    pair.check(model)
    if form is None:
        form = S.Context(pair.first, model, tau).form
    with ThreadPoolExecutor(max_workers=workers) as ex:
        f1 = ex.submit(S.run, pair.first, model, tau, form)
        f2 = ex.submit(S.run, pair.second, model, tau, form)
        t1, t2 = f1.result(), f2.result()
    return compare(t1, t2, pair), t1, t2


def battery(problem, model, tau, directions=DIRECTIONS, epsilons=EPSILONS, workers=4):
    """All single-datum perturbations; the unperturbed run is shared."""
    form = S.Context(problem, model, tau).form
    base = S.run(problem, model, tau, form)
    jobs = [(dn, eps, perturb(problem, dn, eps)) for dn in directions for eps in epsilons]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(S.run, pr, model, tau, form) for _, _, pr in jobs]
        trajs = [f.result() for f in futs]
    out = []
    for (dn, eps, pr), tr in zip(jobs, trajs):
        pair = PerturbationPair(problem, pr, dn, eps)
        out.append(compare(base, tr, pair))
    return out


def ratio_spread(results):
    """max/min of the ratio per direction."""
    by = {}
    for r in results:
        by.setdefault(r.label, []).append(r.ratio)
    return {k: (max(v) / min(v) if min(v) > 0 else float("inf")) for k, v in by.items()}


def trajectories_identical(t1, t2):
    names = ("u", "u_prev", "e", "p", "z", "theta", "omega", "zeta", "sigma")
    return all(np.array_equal(getattr(a, n), getattr(b, n)) for a, b in zip(t1.states, t2.states) for n in names) \
        and len(t1.states) == len(t2.states)


def results_csv(results):
    lines = ["direction,eps,lhs,rhs,ratio,P"]
    for r in results:
        lines.append(f"{r.label},{float(r.eps)!r},{float(r.lhs)!r},{float(r.rhs)!r},{float(r.ratio)!r},{float(r.P)!r}")
    return "\n".join(lines) + "\n"
