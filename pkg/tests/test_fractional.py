import numpy as np
import pytest

import oracles
from tvpdamage import fractional as fr
from tvpdamage import mesh_fem as mf

# polar-overlap oracle values for alpha = 2.5 and P = (0,0),(1,0),(1,1)
P = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
PAIRS = [
    (np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), 3.7746708644595683),   # shared edge
    (np.array([[1.0, 0.0], [2.0, 0.0], [2.0, 1.0]]), 0.4102595543911841),   # shared vertex
    (np.array([[2.0, 0.0], [3.0, 0.0], [3.0, 1.0]]), 0.048302161118534984), # separated
]


@pytest.mark.parametrize("Q, ref", PAIRS)
def test_triangle_weights_against_overlap_oracle(Q, ref):
    assert fr.triangle_pair_weight(P, Q, 2.5) == pytest.approx(ref, rel=1e-7)


def test_overlap_oracle_reproduces_pinned_value():
    assert oracles.triangle_weight(P, PAIRS[1][0], 2.5) == pytest.approx(PAIRS[1][1], rel=1e-9)


@pytest.mark.parametrize("ab", [(0.0, 0.5, 0.5, 1.0), (0.0, 0.25, 0.5, 1.0), (0.0, 1.0, 1.0, 1.5)])
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.4])
def test_interval_weights(ab, alpha):
    assert fr.interval_pair_weight(*ab, alpha) == pytest.approx(oracles.interval_weight(*ab, alpha), rel=1e-9)


@pytest.mark.parametrize("m, s", [
    (mf.build_mesh([1.0], [5], ["left"]), 0.9),
    (mf.build_mesh([1.0, 1.0], [2, 2], ["left"]), 1.25),
])
def test_affine_kernel_and_constant(m, s):
    form = fr.assemble_as(m, s)
    A = form.matrix
    assert np.allclose(A, A.T, atol=0)
    rng = np.random.default_rng(1)
    aff = m.vertices @ rng.normal(size=m.d) + 0.3
    assert np.abs(A @ aff).max() <= 1e-12 * np.abs(A).max()
    assert not np.any(form.apply(np.full(m.nV, 2.0)) > 1e-12 * np.abs(A).max())
    z = rng.normal(size=m.nV)
    assert form.value(z) >= -1e-12


def test_double_sum_matches_assembly():
    m = mf.build_mesh([1.0, 1.0], [2, 1], ["left"])
    form = fr.assemble_as(m, 1.2)
    ref = oracles.as_matrix_from_weights(m, form.weights)
    assert np.allclose(form.matrix, ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_scaling_exponent():
    m = mf.build_mesh([1.0, 1.0], [2, 2], ["left"])
    s = 1.3
    A1 = fr.assemble_as(m, s).matrix
    A2 = fr.assemble_as(m.scaled(0.5), s).matrix
    assert np.allclose(A2, 0.5 ** fr.scaling_exponent(2, s) * A1, rtol=1e-10, atol=1e-12)


def test_translation_invariance():
    m = mf.build_mesh([1.0], [4], ["left"])
    A1 = fr.assemble_as(m, 0.8).matrix
    A2 = fr.assemble_as(m.translated([3.0]), 0.8).matrix
    assert np.allclose(A1, A2, rtol=1e-12)


def test_exponent_range():
    with pytest.raises(ValueError):
        fr.check_exponent(2, 1.0)
    with pytest.raises(ValueError):
        fr.check_exponent(1, 1.5)
    fr.check_exponent(2, 1.25)


def test_size_mismatch():
    form = fr.assemble_as(mf.build_mesh([1.0], [2], ["left"]), 0.8)
    with pytest.raises(ValueError):
        form.apply(np.zeros(4))
