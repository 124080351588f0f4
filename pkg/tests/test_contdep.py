import numpy as np
import pytest

from conftest import bundled
from tvpdamage import contdep as CD


@pytest.fixture(scope="module")
def cfg():
    return bundled("contdep")


def test_identical_pair(cfg):
    pair = CD.PerturbationPair(cfg.problem, cfg.problem, "same")
    res, t1, t2 = CD.run_pair(pair, cfg.model, cfg.tau)
    assert res.lhs == 0.0 and res.ratio == 0.0
    assert CD.trajectories_identical(t1, t2)


def test_preconditions(cfg):
    pair = CD.PerturbationPair(cfg.problem, cfg.problem)
    with pytest.raises(ValueError, match="constant yield"):
        pair.check(cfg.model.replace(constant_yield=0.0))
    with pytest.raises(ValueError, match="nu"):
        pair.check(cfg.model.replace(nu=0.0))
    hot = cfg.problem.replace(prescribed_theta=())
    with pytest.raises(ValueError, match="prescribed"):
        CD.PerturbationPair(hot, hot).check(cfg.model)


def test_perturbations_touch_one_datum(cfg):
    pr = cfg.problem
    for dn in CD.DIRECTIONS:
        q = CD.perturb(pr, dn, 1e-3)
        parts = CD.data_distance(pr, q, cfg.tau, CD.S.Context(pr, cfg.model, cfg.tau).form)
        assert sum(parts.values()) > 0, dn
    with pytest.raises(ValueError):
        CD.perturb(pr, "gravity", 1e-3)
    z = CD.perturb(pr, "z0", 1e-2).z0
    assert np.all(z <= pr.z0)


def test_data_distance_is_linear_in_eps(cfg):
    pr = cfg.problem
    form = CD.S.Context(pr, cfg.model, cfg.tau).form
    for dn in ("load", "w", "theta", "v0"):
        a = sum(CD.data_distance(pr, CD.perturb(pr, dn, 1e-2), cfg.tau, form).values())
        b = sum(CD.data_distance(pr, CD.perturb(pr, dn, 1e-3), cfg.tau, form).values())
        assert a == pytest.approx(10 * b, rel=1e-9), dn


def test_small_battery_and_csv(cfg):
    res = CD.battery(cfg.problem, cfg.model, cfg.tau, ("load", "theta"), (1e-2, 1e-3))
    assert len(res) == 4
    spread = CD.ratio_spread(res)
    assert set(spread) == {"load", "theta"} and max(spread.values()) < 2.0
    assert all(r.lhs > 0 and np.isfinite(r.ratio) for r in res)
    lines = CD.results_csv(res).splitlines()
    assert lines[0] == "direction,eps,lhs,rhs,ratio,P" and len(lines) == 5
