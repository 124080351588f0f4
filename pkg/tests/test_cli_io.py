import csv
import os

import numpy as np
import pytest

from conftest import bundled
from tvpdamage import auditors as A
from tvpdamage import cli_io as io
from tvpdamage import stepper as S

BASE = """[mesh]
d = 2
divisions = 2, 2
dirichlet = left

[time]
T = 1
tau = 1/4
"""


def test_fractions_and_defaults():
    cfg = io.parse_config(BASE)
    assert cfg.tau == 0.25 and cfg.problem.mesh.nE == 8
    assert cfg.audits == A.ALL_AUDITS
    assert cfg.model.d == 2


@pytest.mark.parametrize("extra, line, word", [
    ("[material]\nlam_C = ten\n", 11, "expected a number"),
    ("[material]\nfoo = 1\n", 11, "unknown material parameter"),
    ("[problem]\nz0 = 1\nshape = 2\n", 12, "unknown key"),
    ("[problem]\nw_grad = 1, 0, 0\n", 11, "expected 4 values"),
])
def test_errors_carry_line_numbers(extra, line, word):
    with pytest.raises(io.ConfigError) as exc:
        io.parse_config(BASE + "\n" + extra, "case.ini")
    assert f"case.ini:{line}:" in str(exc.value) and word in str(exc.value)


def test_semantic_errors():
    with pytest.raises(io.ConfigError, match="integer multiple"):
        io.parse_config(BASE.replace("tau = 1/4", "tau = 0.3"))
    with pytest.raises(io.ConfigError, match="exceeds 1"):
        io.parse_config(BASE + "\n[problem]\nz0 = 1.5\n")
    with pytest.raises(io.ConfigError, match="unknown audit"):
        io.parse_config(BASE + "\n[audits]\nenabled = total, vibes\n")
    with pytest.raises(io.ConfigError, match="C_R"):
        io.parse_config(BASE + "\n[material]\nc_r = 2\n")


def test_all_bundled_configs_parse():
    names = sorted(f[:-4] for f in os.listdir(io.CONFIG_DIR) if f.endswith(".ini"))
    assert {"quiescent", "loaded", "tensile_cooling", "contdep"} <= set(names)
    for n in names:
        io.load_config(io.bundled_config(n))


def test_quiescent_simulate_and_audit(tmp_path, capsys):
    out = str(tmp_path / "q")
    assert io.main(["simulate", "--config", "quiescent", "--out", out]) == 0
    u = np.loadtxt(os.path.join(out, "fields_u.csv"), delimiter=",", skiprows=1)
    z = np.loadtxt(os.path.join(out, "fields_z.csv"), delimiter=",", skiprows=1)
    assert np.all(u[:, 2:] == u[0, 2:]) and np.all(z[:, 2:] == z[0, 2:])
    rep = str(tmp_path / "rep")
    assert io.main(["audit", out, "--out", rep]) == 0
    with open(os.path.join(rep, "margins.csv")) as fh:
        margins = np.array([float(row["margin"]) for row in csv.DictReader(fh)])
    assert len(margins) > 0 and np.all(margins == 0.0)
    assert "PASS" in capsys.readouterr().out


def test_round_trip_gives_identical_margins(tmp_path):
    cfg = bundled("loaded")
    traj = S.run(cfg.problem, cfg.model, cfg.tau)
    io.write_trajectory(traj, str(tmp_path), cfg)
    back, _ = io.read_trajectory(str(tmp_path))
    for a, b in zip(traj.states, back.states):
        for n in io.NODAL + io.ELEMENT:
            assert np.array_equal(getattr(a, n), getattr(b, n)), n
    r1, r2 = A.audit_all(traj), A.audit_all(back)
    for name in r1.margins:
        assert np.array_equal(r1.margins[name][2], r2.margins[name][2]), name


def test_command_errors(tmp_path, capsys):
    assert io.main(["simulate", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text(BASE + "\n[material]\nmu_C = -1\n")
    assert io.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err
    assert io.main(["audit", str(tmp_path / "missing")]) == 2
    with pytest.raises(SystemExit):
        io.main(["dance"])


def test_validate_material(capsys):
    assert io.main(["validate-material", "--config", "loaded"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_sweep_writes_tables(tmp_path):
    out = str(tmp_path / "sw")
    assert io.main(["sweep-tau", "--config", "loaded", "--out", out]) == 0
    lines = open(os.path.join(out, "apriori_table.csv")).read().splitlines()
    assert lines[0].startswith("norm,tau=0.125,tau=0.0625,tau=0.03125")
    sc = open(os.path.join(out, "self_convergence.csv")).read().splitlines()
    assert len(sc) == 3
    assert os.path.exists(os.path.join(out, "tau_32", "manifest.txt"))


def test_contdep_command(tmp_path):
    text = open(io.bundled_config("contdep")).read()
    text = text.replace("directions = v0, e0_p0, z0, load, w, theta", "directions = load")
    text = text.replace("eps = 1e-2, 1e-3, 1e-4", "eps = 1e-2, 1e-3")
    path = tmp_path / "cd.ini"
    path.write_text(text)
    out = str(tmp_path / "cd")
    assert io.main(["contdep", "--config", str(path), "--out", out]) == 0
    assert len(open(os.path.join(out, "contdep.csv")).read().splitlines()) == 3
