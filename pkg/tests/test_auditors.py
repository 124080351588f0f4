import copy

import numpy as np
import pytest

from conftest import battery_run, bundled, family
from tvpdamage import auditors as A
from tvpdamage import stepper as S


def test_quiescent_margins_are_zero(quiescent_traj):
    rep = A.audit_all(quiescent_traj)
    assert rep.ok
    for name in ("total_energy", "mechanical_energy", "entropy_phi_one", "entropy_phi_hat", "entropy_phi_ramp"):
        assert np.all(rep.margins[name][2] == 0.0), name
    sec = rep.sections["positivity_feasibility"]
    assert sec["min_theta"] == 1.0 >= sec["theta_bar"]


def test_entropy_hand_assembly_on_heat_mode():
    cfg = bundled("heat_only")
    traj = S.run(cfg.problem, cfg.model, cfg.tau)
    rep = A.audit_all(traj, ("entropy",))
    iv, jv, mg, _ = rep.margins["entropy_phi_hat"]
    # uniform theta: gradients vanish, only the log increment and the source remain;
    # the hat sits on the centre node of the 2x2 grid, six triangles of area 1/8
    ml = 6 * (1 / 8) / 3
    G, tau = 2.0, cfg.tau
    th = 1.0 + G * tau * np.arange(traj.K + 1)
    for i, j, m in zip(iv, jv, mg):
        ref = ml * (np.log(th[j] / th[i]) - sum(tau * G / th[k] for k in range(i + 1, j + 1)))
        assert m == pytest.approx(ref, abs=1e-10)


def test_negative_test_function_rejected(quiescent_traj):
    with pytest.raises(ValueError, match="nonnegative"):
        A.audit_entropy(quiescent_traj, lambda X, t: np.full(len(X), -1.0))


def test_energy_violation_is_detected():
    traj = copy.deepcopy(battery_run("loaded"))
    traj.states[-1].theta = traj.states[-1].theta + 1.0  # heat from nowhere
    rep = A.audit_all(traj, ("total",))
    assert not rep.passed["total_energy"]
    assert rep.sections["total_energy"]["min_margin"] < -rep.tol


def test_damage_increase_is_detected():
    traj = copy.deepcopy(battery_run("damage"))
    traj.states[3].z = traj.states[3].z + 1e-9
    rep = A.audit_positivity_feasibility(traj)
    assert not rep.passed["feasibility"]


def test_tampered_sources_are_detected():
    traj = copy.deepcopy(battery_run("loaded"))
    src = traj.records[0].sources
    key = next(iter(src))
    src[key] = src[key] + 1e-3
    rep = A.audit_all(traj, ("total",))
    assert not rep.passed["shared_assembly"]


def test_report_text_and_csv():
    rep = A.audit_all(battery_run("loaded"))
    text = rep.to_text()
    assert "[summary]" in text and "[total_energy]" in text and "passed = True" in text
    csv = rep.margins_csv().splitlines()
    K = battery_run("loaded").K
    assert csv[0] == "audit,i,j,t_i,t_j,margin"
    n_energy = sum(1 for line in csv if line.startswith("total_energy,"))
    assert n_energy == K * (K + 1) // 2


def test_mechanical_margin_matches_total_margin():
    rep = A.audit_all(battery_run("tensile_cooling"), ("total", "mechanical"))
    a, b = rep.margins["total_energy"][2], rep.margins["mechanical_energy"][2]
    assert np.abs(a - b).max() <= 1e-9 * rep.energy_scale


def test_apriori_quiescent_family():
    trajs = family("quiescent")
    taus, names, table, flags, dec = A.audit_apriori(trajs)
    row = dict(zip(names, table))
    for n in ("u_H1_H1", "e_H1_L2", "p_H1_L2", "z_H1_L2", "theta_BV_dual", "p_Linf_L2", "zeta_Linf"):
        assert np.all(row[n] == 0.0), n
    for n in ("e_Linf_L2", "z_Linf_Hs", "theta_Linf_L1"):
        assert np.ptp(row[n]) <= 1e-14, n
    assert not any(flags.values())
    with pytest.raises(ValueError):
        A.audit_apriori(trajs[:2])
    assert A.apriori_csv(taus, names, table, flags).startswith("norm,tau=0.25")
