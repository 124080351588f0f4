import numpy as np
import pytest

from conftest import battery_run, bundled
from tvpdamage import constitutive as C
from tvpdamage import mesh_fem as mf
from tvpdamage import problem as P
from tvpdamage import stepper as S

FIELDS = ("u", "u_prev", "e", "p", "z", "theta", "zeta", "sigma")


def test_quiescent_states_never_change(quiescent_traj):
    s0 = quiescent_traj.states[0]
    for s in quiescent_traj.states[1:]:
        for n in FIELDS:
            assert np.array_equal(getattr(s, n), getattr(s0, n)), n


def test_pure_heat_mode_gains_tau_G():
    cfg = bundled("heat_only")
    traj = S.run(cfg.problem, cfg.model, cfg.tau)
    G = float(cfg.problem.G.amplitude)
    th = traj.stack("theta")
    for k in range(1, traj.K + 1):
        assert np.allclose(th[k], th[k - 1] + cfg.tau * G, rtol=0, atol=1e-13)
    assert np.abs(traj.stack("u")).max() == 0.0


def test_run_rejects_bad_initial_damage():
    cfg = bundled("quiescent")
    pr = cfg.problem.replace(z0=np.full(cfg.problem.mesh.nV, 1.01))
    with pytest.raises(ValueError, match="exceeds 1"):
        S.run(pr, cfg.model, cfg.tau)


def test_by_parts_identity():
    rng = np.random.default_rng(4)
    v, h = list(rng.normal(size=(7, 3))), list(rng.normal(size=(7, 3)))
    lhs, rhs = S.by_parts(v, h, 0.1)
    assert abs(lhs - rhs) <= 1e-12


def _damage_ctx(model, divisions=(4,)):
    m = mf.build_mesh([1.0] * len(divisions), list(divisions), ["left"])
    d = m.d
    Wg = np.zeros((d, d))
    init = P.default_initial(m, Wg, np.zeros(d), 0.0)
    pr = P.ProblemData(m, 1.0, 1.1 if d == 1 else 1.25, P.zero_term(d), P.zero_term(d), P.zero_term(),
                       P.zero_term(), Wg, np.zeros(d), P.Profile(), **init)
    return S.Context(pr, model, 0.125)


def test_damage_stationary_datum():
    mdl = C.MaterialModel(d=1)
    ctx = _damage_ctx(mdl)
    n, nE = ctx.mesh.nV, ctx.mesh.nE
    z_prev = np.ones(n)
    e0, th0 = np.zeros((nE, 1, 1)), np.zeros(n)
    z, omega, _ = S.solve_damage_step(ctx, z_prev, e0, th0)
    assert np.array_equal(z, z_prev)
    Y = np.zeros(nE)
    J0 = S.damage_functional(ctx, z, z_prev, Y, th0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        zt = z_prev - 1e-3 * rng.uniform(0, 1, n)
        assert J0 <= S.damage_functional(ctx, zt, z_prev, Y, th0)
    assert S.damage_kkt_residual(ctx, z, z_prev, omega) <= 1e-12


def test_damage_step_under_strain_is_monotone_and_kkt():
    mdl = C.MaterialModel(nu=0.1)
    ctx = _damage_ctx(mdl, (2, 2))
    n, nE = ctx.mesh.nV, ctx.mesh.nE
    rng = np.random.default_rng(2)
    z_prev = rng.uniform(0.7, 1.0, n)
    e = np.zeros((nE, 2, 2))
    e[:, 0, 0] = rng.uniform(0.5, 2.0, nE)
    z, omega, stats = S.solve_damage_step(ctx, z_prev, e, np.full(n, 0.1))
    assert np.all(z <= z_prev) and np.any(z < z_prev) and np.all(z > 0)
    assert S.damage_kkt_residual(ctx, z, z_prev, omega) <= 1e-9
    assert stats["damage_kkt"] <= 1e-9


def test_runs_are_deterministic():
    cfg = bundled("loaded")
    t1 = S.run(cfg.problem, cfg.model, 0.25)
    t2 = S.run(cfg.problem, cfg.model, 0.25)
    for a, b in zip(t1.states, t2.states):
        for n in FIELDS:
            assert np.array_equal(getattr(a, n), getattr(b, n))


def test_loaded_run_is_admissible():
    traj = battery_run("loaded")
    m = traj.mesh
    ws = [traj.w0] + [r.w for r in traj.records]
    for s, w in zip(traj.states, ws):
        assert np.abs(mf.strain(m, s.u) - s.e - s.p).max() <= 1e-10
        assert np.array_equal(s.u[m.dirichlet_nodes], w[m.dirichlet_nodes])
        assert np.abs(np.trace(s.p, axis1=1, axis2=2)).max() <= 1e-12


def test_interpolants(quiescent_traj):
    tr = battery_run("loaded")
    tau = tr.tau
    assert tr.right(0.5 * tau, "z") is tr.states[1].z
    assert tr.left(0.5 * tau, "z") is tr.states[0].z
    mid = tr.linear(1.5 * tau, "theta")
    assert np.allclose(mid, 0.5 * (tr.states[1].theta + tr.states[2].theta))
    assert tr.K == len(tr.records) == round(tr.problem.T / tau)
