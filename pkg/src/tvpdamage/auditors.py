"""Runtime certificates for a computed trajectory.

Every inequality is evaluated on all node-time intervals [t_i, t_j] as a
signed margin RHS - LHS, built from per-state energies and per-step
increments through prefix sums. Heat sources enter through the nodal vectors
assembled by the stepper; the audit recomputes them from the stored fields
and checks that they agree bit for bit with the step records.
"""

from dataclasses import dataclass, field

import numpy as np

from . import constitutive as C
from . import mesh_fem as mf
from . import stepper as S
from . import tensors as T

DISSIPATION = ("visc", "rate_R", "rate_sq", "rate_as", "plast_H", "plast_sq")
COUPLING = ("thermo", "theta_dz")
REL_TOL = 1e-7


@dataclass
class AuditReport:
    tol: float = 0.0
    energy_scale: float = 0.0
    sections: dict = field(default_factory=dict)   # name -> {key: value}
    margins: dict = field(default_factory=dict)    # name -> (i, j, margin) arrays
    passed: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(self.passed.values())

    def add_margins(self, name, iv, jv, margin, times):
        self.margins[name] = (iv, jv, margin, times)
        k = int(np.argmin(margin)) if len(margin) else 0
        self.passed[name] = bool(len(margin) == 0 or (np.all(np.isfinite(margin)) and margin.min() >= -self.tol))
        self.sections[name] = {
            "min_margin": float(margin.min()) if len(margin) else 0.0,
            "max_margin": float(margin.max()) if len(margin) else 0.0,
            "argmin_interval": f"[{times[iv[k]]:.10g}, {times[jv[k]]:.10g}]" if len(margin) else "",
            "intervals": int(len(margin)),
            "tolerance": self.tol,
            "passed": self.passed[name],
        }

    def to_text(self):
        lines = ["[summary]", f"passed = {self.ok}", f"tolerance = {float(self.tol)!r}",
                 f"energy_scale = {float(self.energy_scale)!r}", ""]
        for name, sec in self.sections.items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                lines.append(f"{k} = {float(v)!r}" if isinstance(v, float) else f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def margins_csv(self):
        rows = ["audit,i,j,t_i,t_j,margin"]
        for name, (iv, jv, mg, times) in self.margins.items():
            for a, b, c in zip(iv, jv, mg):
                rows.append(f"{name},{a},{b},{float(times[a])!r},{float(times[b])!r},{float(c)!r}")
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- shared pieces

def context(traj):
    return S.Context(traj.problem, traj.model, traj.tau, traj.form)


def recompute_sources(ctx, traj):
    """Heat source vectors recomputed from stored states, one dict per step."""
    out = []
    for k in range(1, traj.K + 1):
        prev, cur = traj.states[k - 1], traj.states[k]
        out.append(S.heat_sources(ctx, prev, cur.z, cur.e, cur.p, cur.theta))
    return out


def sources_identical(traj, sources):
    return all(np.array_equal(rec.sources[n], src[n]) for rec, src in zip(traj.records, sources)
               for n in rec.sources)


def velocities(traj):
    tau = traj.tau
    return [(s.u - s.u_prev) / tau for s in traj.states]


def energies(ctx, traj):
    """Per-state kinetic, Q, damage, regularization and thermal energies."""
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    A = ctx.form.matrix
    out = {n: np.zeros(traj.K + 1) for n in ("kin", "Q", "G", "reg", "heat")}
    for k, (s, v) in enumerate(zip(traj.states, velocities(traj))):
        vv = v.ravel()
        out["kin"][k] = 0.5 * mdl.rho * vv @ ctx.Mv @ vv
        a = T.to_mandel(s.e)
        zb = mf.element_means(m, s.z)
        out["Q"][k] = 0.5 * np.sum(m.volumes * mdl.g_C(zb) * np.einsum("ei,ij,ej->e", a, mdl.C0, a))
        W = mdl.damage_potential(s.z)[0]
        out["G"][k] = 0.5 * s.z @ A @ s.z + ctx.ml @ W
        g = mdl.gamma
        ne = T.norm(s.e) ** g + T.norm(s.p) ** g
        out["reg"][k] = mdl.tau_reg * tau / g * np.sum(m.volumes * ne)
        out["heat"][k] = ctx.ml @ s.theta
    return out


def increments(ctx, traj, sources):
    """Per-step work, source and dissipation terms (index k-1 for step k)."""
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    K = traj.K
    vel = velocities(traj)
    ws = [traj.w0] + [r.w for r in traj.records]
    out = {n: np.zeros(K) for n in ("heat_src", "load", "sig_w", "rho_w", "diss", "coupling")}
    for k in range(1, K + 1):
        rec, src = traj.records[k - 1], sources[k - 1]
        s, sp = traj.states[k], traj.states[k - 1]
        dw = ws[k] - ws[k - 1]
        out["heat_src"][k - 1] = tau * (rec.G.sum() + rec.g.sum())
        out["load"][k - 1] = rec.load @ ((s.u - sp.u) - dw).ravel()
        eps_w = T.to_mandel(mf.strain(m, dw))
        out["sig_w"][k - 1] = np.sum(m.volumes * np.einsum("ei,ei->e", T.to_mandel(s.sigma), eps_w))
        out["rho_w"][k - 1] = mdl.rho * (vel[k] - vel[k - 1]).ravel() @ ctx.Mv @ (dw / tau).ravel()
        out["diss"][k - 1] = tau * sum(src[n].sum() for n in DISSIPATION)
        out["coupling"][k - 1] = -tau * sum(src[n].sum() for n in COUPLING)
    return out


def _interval_margins(state_lhs, step_rhs):
    """margin(i, j) = state_lhs[i] - state_lhs[j] + sum_{k=i+1..j} step_rhs[k-1]."""
    K = len(state_lhs) - 1
    iv, jv = np.triu_indices(K + 1, k=1)
    P = np.concatenate([[0.0], np.cumsum(step_rhs)])
    return iv, jv, state_lhs[iv] - state_lhs[jv] + P[jv] - P[iv]


def energy_scale(en, inc):
    total_src = sum(np.abs(inc[n]).sum() for n in ("heat_src", "load", "sig_w", "rho_w"))
    return float(en["kin"][0] + en["Q"][0] + en["G"][0] + en["reg"][0] + en["heat"][0] + total_src)


# ---------------------------------------------------------------- audits

def audit_total_energy(traj, report=None, ctx=None, sources=None):
    ctx = ctx or context(traj)
    sources = sources if sources is not None else recompute_sources(ctx, traj)
    en, inc = energies(ctx, traj), increments(ctx, traj, sources)
    report = report or _new_report(en, inc)
    state = en["kin"] + en["Q"] + en["G"] + en["reg"] + en["heat"]
    rhs = inc["heat_src"] + inc["load"] + inc["sig_w"] + inc["rho_w"]
    iv, jv, mg = _interval_margins(state, rhs)
    report.add_margins("total_energy", iv, jv, mg, traj.times())
    return report


def audit_mechanical_energy(traj, report=None, ctx=None, sources=None):
    ctx = ctx or context(traj)
    sources = sources if sources is not None else recompute_sources(ctx, traj)
    en, inc = energies(ctx, traj), increments(ctx, traj, sources)
    report = report or _new_report(en, inc)
    state = en["kin"] + en["Q"] + en["G"] + en["reg"]
    rhs = inc["load"] + inc["sig_w"] + inc["rho_w"] + inc["coupling"] - inc["diss"]
    iv, jv, mg = _interval_margins(state, rhs)
    report.add_margins("mechanical_energy", iv, jv, mg, traj.times())
    report.sections["mechanical_energy"]["nu_as_dissipation"] = float(
        traj.tau * sum(src["rate_as"].sum() for src in sources))
    return report


def test_function_values(traj, phi):
    """phi^0 = phi(0) and phi^k = local mean over step k (midpoint of a time-linear phi)."""
    x = traj.mesh.vertices
    tau = traj.tau
    vals = [np.asarray(phi(x, 0.0), float)]
    for k in range(1, traj.K + 1):
        vals.append(np.asarray(phi(x, (k - 0.5) * tau), float))
    vals = [np.broadcast_to(v, (traj.mesh.nV,)).astype(float) for v in vals]
    if any(np.any(v < 0) for v in vals):
        raise ValueError("entropy test function must be nonnegative")
    return vals


def entropy_terms(ctx, traj, phis, sources):
    """Per-state boundary terms and per-step terms of the discrete entropy inequality."""
    m, tau = ctx.mesh, ctx.tau
    ml = ctx.ml
    logs = [np.log(s.theta) for s in traj.states]
    K = traj.K
    boundary = np.array([ml @ (logs[k] * phis[k]) for k in range(K + 1)])
    lhs_step = np.zeros(K)
    rhs_step = np.zeros(K)
    for k in range(1, K + 1):
        s, rec, src = traj.states[k], traj.records[k - 1], sources[k - 1]
        th = s.theta
        v = phis[k] / th
        Kc = S.conductivity_matrix(ctx, mf.element_means(m, th))
        grad_log_phi = logs[k] @ Kc @ phis[k]          # int kappa grad log(theta) . grad phi
        grad_cross = grad_log_phi - (Kc @ th) @ v       # int kappa (phi/theta) grad log(theta) . grad theta
        bundle = rec.G + sum(src.values())
        lhs_step[k - 1] = ml @ (logs[k - 1] * (phis[k] - phis[k - 1])) - tau * grad_log_phi
        rhs_step[k - 1] = -tau * grad_cross - tau * (bundle @ v) - tau * (rec.g @ v)
    return boundary, lhs_step, rhs_step


def audit_entropy(traj, phi, name="entropy", report=None, ctx=None, sources=None):
    ctx = ctx or context(traj)
    sources = sources if sources is not None else recompute_sources(ctx, traj)
    if report is None:
        report = _new_report(energies(ctx, traj), increments(ctx, traj, sources))
    phis = test_function_values(traj, phi)
    boundary, lhs_step, rhs_step = entropy_terms(ctx, traj, phis, sources)
    # margin = RHS - LHS with RHS containing boundary[j] - boundary[i]
    iv, jv, mg = _interval_margins(-boundary, rhs_step - lhs_step)
    report.add_margins(name, iv, jv, mg, traj.times())
    return report


def audit_positivity_feasibility(traj, report=None, theta_star=None):
    ctx = context(traj)
    m, mdl = ctx.mesh, ctx.model
    report = report or AuditReport()
    th0 = traj.states[0].theta
    theta_star = float(th0.min()) if theta_star is None else theta_star
    T_end = traj.problem.T
    Cs = mdl.C_star()
    tbar = C.theta_lower_bound(Cs, T_end, theta_star)
    thetas = traj.stack("theta")
    zs = traj.stack("z")
    dz = np.diff(zs, axis=0)
    adm = 0.0
    tr = 0.0
    dir_res = 0.0
    zeta_max = 0.0
    yield_dev = 0.0
    dn = m.dirichlet_nodes
    ws = [traj.w0] + [r.w for r in traj.records]
    for k, s in enumerate(traj.states):
        r = mf.strain(m, s.u) - s.e - s.p
        adm = max(adm, float((T.norm(r) / (1 + T.norm(s.e) + T.norm(s.p))).max()))
        tr = max(tr, float(np.abs(T.trace(s.p)).max()))
        dir_res = max(dir_res, float(np.abs(s.u[dn] - ws[k][dn]).max()) if dn.any() else 0.0)
        zeta_max = max(zeta_max, float(T.norm(s.zeta).max()))
        if k > 0:
            moved = T.norm(s.p - traj.states[k - 1].p) > 0
            if moved.any():
                sp = traj.states[k - 1]
                sy = mdl.yield_radius(mf.element_means(m, s.z), mf.element_means(m, sp.theta))
                yield_dev = max(yield_dev, float(np.abs(T.norm(s.zeta) - sy)[moved].max()))
    sec = {
        "theta_star": theta_star, "C_bar": mdl.C_bar(), "E_norm": mdl.E_norm(), "C_D1": mdl.C_D1(),
        "C_star": Cs, "theta_bar": tbar,
        "min_theta": float(thetas.min()) if traj.problem.heat_enabled else float("nan"),
        "min_z": float(zs.min()), "max_z": float(zs.max()), "zeta_star_empirical": float(zs.min()),
        "max_z_increment": float(dz.max()) if len(dz) else 0.0,
        "admissibility_residual": adm, "plastic_trace_residual": tr, "dirichlet_residual": dir_res,
        "max_zeta": zeta_max, "C_R": mdl.C_R, "yield_surface_deviation": yield_dev,
    }
    checks = {
        "positivity": (not traj.problem.heat_enabled) or sec["min_theta"] >= tbar - 1e-9,
        "feasibility": sec["min_z"] > 0 and sec["max_z"] <= 1.0 and sec["max_z_increment"] <= 0.0,
        "admissibility": adm <= 1e-10 and dir_res == 0.0 and tr <= 1e-12,
        "plastic_selection": zeta_max <= mdl.C_R + 1e-12 and yield_dev <= 1e-10,
    }
    for k, v in checks.items():
        sec[f"{k}_passed"] = bool(v)
        report.passed[k] = bool(v)
    report.sections["positivity_feasibility"] = sec
    return report


def _new_report(en, inc):
    scale = energy_scale(en, inc)
    return AuditReport(tol=REL_TOL * scale, energy_scale=scale)


def standard_test_functions(mesh, T_end):
    """phi = 1, a spatial hat and a time-ramped hat (peak at the vertex nearest the centroid)."""
    x = mesh.vertices
    c = x.mean(axis=0)
    node = int(np.argmin(np.linalg.norm(x - c, axis=1)))
    hat = np.zeros(mesh.nV)
    hat[node] = 1.0
    return {
        "entropy_phi_one": lambda X, t: np.ones(len(X)),
        "entropy_phi_hat": lambda X, t: hat,
        "entropy_phi_ramp": lambda X, t: hat * (0.5 + t / T_end),
    }


ALL_AUDITS = ("total", "mechanical", "entropy", "positivity")


def audit_all(traj, audits=ALL_AUDITS):
    """Run the selected audits on a trajectory and return one report."""
    ctx = context(traj)
    sources = recompute_sources(ctx, traj)
    en, inc = energies(ctx, traj), increments(ctx, traj, sources)
    report = _new_report(en, inc)
    ident = sources_identical(traj, sources) if traj.records and traj.records[0].sources else True
    report.sections["shared_assembly"] = {"heat_sources_identical": bool(ident)}
    report.passed["shared_assembly"] = bool(ident)
    if "total" in audits:
        audit_total_energy(traj, report, ctx, sources)
    if "mechanical" in audits:
        audit_mechanical_energy(traj, report, ctx, sources)
    if "entropy" in audits and traj.problem.heat_enabled:
        for name, phi in standard_test_functions(traj.mesh, traj.problem.T).items():
            audit_entropy(traj, phi, name, report, ctx, sources)
    if "positivity" in audits:
        audit_positivity_feasibility(traj, report)
    return report


# ---------------------------------------------------------------- a priori table

def apriori_norms(traj):
    ctx = context(traj)
    m, mdl, tau = ctx.mesh, ctx.model, ctx.tau
    A = ctx.form.matrix
    st = traj.states
    K = traj.K
    vel = velocities(traj)
    g = mdl.gamma

    def hs(z):
        return np.sqrt(max(z @ ctx.M @ z + z @ A @ z, 0.0))

    def l2t(vals):
        return float(np.sqrt(tau * np.sum(np.square(vals))))

    rng = range(1, K + 1)
    d_e = [mf.element_l2_norm(m, (st[k].e - st[k - 1].e) / tau) for k in rng]
    d_p = [mf.element_l2_norm(m, (st[k].p - st[k - 1].p) / tau) for k in rng]
    d_z = [(st[k].z - st[k - 1].z) / tau for k in rng]
    out = {
        "u_Linf_H1": max(mf.h1_norm(m, s.u) for s in st),
        "u_H1_H1": l2t([mf.h1_norm(m, vel[k]) for k in rng]),
        "u_W1inf_L2": max(mf.l2_norm(m, v) for v in vel),
        "e_Linf_L2": max(mf.element_l2_norm(m, s.e) for s in st),
        "e_H1_L2": l2t(d_e),
        "e_gamma_weighted": tau ** (1 / g) * max(mf.element_lp_norm(m, s.e, g) for s in st),
        "p_Linf_L2": max(mf.element_l2_norm(m, s.p) for s in st),
        "p_H1_L2": l2t(d_p),
        "p_gamma_weighted": tau ** (1 / g) * max(mf.element_lp_norm(m, s.p, g) for s in st),
        "z_Linf_Hs": max(hs(s.z) for s in st),
        "z_H1_L2": l2t([mf.l2_norm(m, v) for v in d_z]),
        "zeta_Linf": max(float(T.norm(s.zeta).max()) for s in st),
    }
    if mdl.nu > 0:
        out["z_H1_Hs"] = l2t([hs(v) for v in d_z])
    if traj.problem.heat_enabled:
        mu = mdl.mu_kappa
        alpha = max(0.0, 2.0 - mu)
        th = [s.theta for s in st]
        out["theta_Linf_L1"] = max(float(ctx.ml @ np.abs(t)) for t in th)
        out["theta_L2_H1"] = l2t([mf.h1_norm(m, th[k]) for k in rng])
        out["log_theta_L2_H1"] = l2t([mf.h1_norm(m, np.log(th[k])) for k in rng])
        grad_pow = lambda r: l2t([np.sqrt(max(th[k] ** r @ mf.stiffness(m) @ th[k] ** r, 0.0)) for k in rng])
        out["theta_pow_plus_grad"] = grad_pow((mu + alpha) / 2)
        out["theta_pow_minus_grad"] = grad_pow((mu - alpha) / 2)
        if m.d == 2 and 1 < mu < 2:
            Ginv = np.linalg.inv(mf.h1_gram(m))
            dual = lambda f: np.sqrt(max((ctx.M @ f) @ Ginv @ (ctx.M @ f), 0.0))
            out["theta_BV_dual"] = float(sum(dual(th[k] - th[k - 1]) for k in rng))
    return {k: float(v) for k, v in out.items()}


WEIGHTED = ("e_gamma_weighted", "p_gamma_weighted")


def audit_apriori(trajs):
    """Norm table over a tau family. Returns (taus, names, table, flags, weighted_decreasing)."""
    if len(trajs) < 3:
        raise ValueError("a priori audit needs at least 3 step sizes")
    trajs = sorted(trajs, key=lambda t: -t.tau)
    taus = [t.tau for t in trajs]
    rows = [apriori_norms(t) for t in trajs]
    names = list(rows[0])
    table = np.array([[r[n] for r in rows] for n in names])
    coarse = table[:, 0]
    flags = {n: bool(table[i].max() > 1.05 * coarse[i] + 1e-300) for i, n in enumerate(names)}
    dec = {}
    for n in WEIGHTED:
        i = names.index(n)
        v = table[i]
        dec[n] = bool(np.all(np.diff(v) < 0) or np.all(v == 0))
    return taus, names, table, flags, dec


def apriori_csv(taus, names, table, flags):
    head = "norm," + ",".join(f"tau={float(t)!r}" for t in taus) + ",flagged"
    lines = [head] + [f"{n}," + ",".join(repr(float(x)) for x in table[i]) + f",{int(flags[n])}"
                      for i, n in enumerate(names)]
    return "\n".join(lines) + "\n"
