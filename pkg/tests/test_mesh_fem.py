import numpy as np
import pytest

from tvpdamage import mesh_fem as mf


def test_interval_counts():
    m = mf.build_mesh([1.0], [4], ["left"])
    assert (m.nV, m.nE) == (5, 4)
    assert m.measure == pytest.approx(1.0, abs=1e-15)


def test_square_counts():
    m = mf.build_mesh([1.0, 1.0], [2, 2], ["left"])
    assert m.nE == 8 and m.nV == 9
    assert m.measure == pytest.approx(1.0, abs=1e-15)
    assert m.dirichlet_nodes.sum() == 3


def test_no_dirichlet_rejected():
    with pytest.raises(ValueError):
        mf.build_mesh([1.0, 1.0], [1, 1], [])
    with pytest.raises(ValueError):
        mf.build_mesh([1.0, 1.0], [1, 1], ["front"])
    with pytest.raises(ValueError):
        mf.build_mesh([1.0, -1.0], [1, 1], ["left"])


@pytest.fixture
def sq():
    return mf.build_mesh([1.0, 1.0], [3, 2], ["left"])


def test_strain_examples(sq):
    x, y = sq.vertices.T
    assert np.array_equal(mf.strain(sq, np.zeros((sq.nV, 2))), np.zeros((sq.nE, 2, 2)))
    e = mf.strain(sq, np.column_stack([x, 0 * x]))
    assert np.allclose(e, np.diag([1.0, 0.0]), atol=1e-14)
    e = mf.strain(sq, np.column_stack([-y, x]))
    assert np.abs(e).max() <= 1e-14


def test_strain_matrix_matches_strain(sq):
    u = np.random.default_rng(0).normal(size=(sq.nV, 2))
    B = mf.strain_matrix(sq)
    e = np.einsum("esk,ek->es", B, u.ravel()[mf.element_dofs(sq)])
    ref = mf.strain(sq, u)
    assert np.allclose(e[:, 0], ref[:, 0, 0]) and np.allclose(e[:, 2], np.sqrt(2) * ref[:, 0, 1])


def test_partition_of_unity(sq):
    assert np.abs(sq.grads.sum(axis=1)).max() <= 1e-13
    M = mf.mass_matrix(sq)
    assert np.allclose(M.sum(axis=1), mf.lumped_mass(sq), atol=1e-15)
    one = np.ones(sq.nV)
    assert one @ M @ one == pytest.approx(1.0, abs=1e-14)
    assert np.abs(mf.stiffness(sq) @ one).max() <= 1e-13


def test_mass_integrates_quadratics():
    # int_0^1 x^2 dx with the consistent P1 mass is exact for the interpolant product
    m = mf.build_mesh([1.0], [1], ["left"])
    x = m.vertices[:, 0]
    assert x @ mf.mass_matrix(m) @ x == pytest.approx(1 / 3, abs=1e-15)


def test_zero_loads(sq):
    assert not np.any(mf.traction_vector(sq, np.zeros(2)))
    assert not np.any(mf.body_force_vector(sq, np.zeros(2)))


def test_load_totals(sq):
    F = np.array([0.3, -0.2])
    b = mf.body_force_vector(sq, F).reshape(-1, 2)
    assert np.allclose(b.sum(axis=0), F * sq.measure, atol=1e-15)
    f = np.array([1.0, 2.0])
    t = mf.traction_vector(sq, f).reshape(-1, 2)
    # Neumann sides: right, bottom, top -> length 3
    assert np.allclose(t.sum(axis=0), 3 * f, atol=1e-14)
    # heat flux enters through the whole boundary
    g = mf.boundary_flux_vector(sq, 0.5)
    assert g.sum() == pytest.approx(0.5 * 4.0, abs=1e-14)


def test_norms(sq):
    x = sq.vertices[:, 0]
    assert mf.l2_norm(sq, np.ones(sq.nV)) == pytest.approx(1.0)
    assert mf.h1_norm(sq, x) ** 2 == pytest.approx(x @ mf.mass_matrix(sq) @ x + 1.0)
    A = np.broadcast_to(np.eye(2), (sq.nE, 2, 2))
    assert mf.element_l2_norm(sq, A) == pytest.approx(np.sqrt(2.0))
    assert mf.element_lp_norm(sq, A, 4.0) == pytest.approx(np.sqrt(2.0))


def test_free_dofs(sq):
    free = mf.free_dofs(sq)
    assert free.sum() == 2 * (sq.nV - 3)
