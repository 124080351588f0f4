import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tvpdamage import cli_io  # noqa: E402
from tvpdamage import stepper as S  # noqa: E402

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}

BATTERY = ("loaded", "tensile_cooling", "shear", "bar1d", "damage")

_cache = {}


def bundled(name, **kw):
    return cli_io.load_config(cli_io.bundled_config(name), **kw)


def battery_run(name):
    """Trajectory of a bundled config at its configured step, cached per session."""
    key = ("run", name)
    if key not in _cache:
        cfg = bundled(name)
        _cache[key] = S.run(cfg.problem, cfg.model, cfg.tau)
    return _cache[key]


def family(name, taus=None):
    cfg = bundled(name)
    taus = tuple(sorted(taus or cfg.taus, reverse=True))
    key = ("family", name, taus)
    if key not in _cache:
        _cache[key] = cli_io.run_family(cfg.problem, cfg.model, list(taus))
    return _cache[key]


@pytest.fixture(scope="session")
def quiescent_traj():
    return battery_run("quiescent")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
