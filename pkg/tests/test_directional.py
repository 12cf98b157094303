import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from stitsim.directional import (DirectionalModel, Hyperplane, ModelError, canonical_direction)
from stitsim.geometry import ConvexPolytope, Segment3

ISO = DirectionalModel.isotropic()
AXIS = DirectionalModel.axis()

unit_vectors = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: np.asarray(v) / np.linalg.norm(v))


def test_isotropic_sample_on_upper_half_sphere():
    u = ISO.sample_direction(np.random.default_rng(0), 1000)
    assert np.allclose(np.linalg.norm(u, axis=1), 1)
    assert np.all(u[:, 2] >= 0)


def test_isotropic_mean_third_coordinate_is_half():
    u = ISO.sample_direction(np.random.default_rng(1), 10 ** 6)
    z = u[:, 2]
    assert abs(z.mean() - 0.5) < 3 * z.std() / math.sqrt(len(z))


def test_axis_model_atom_frequencies():
    u = AXIS.sample_direction(np.random.default_rng(2), 30000)
    idx = np.argmax(np.abs(u), axis=1)
    assert np.allclose(np.abs(u).max(axis=1), 1)
    assert stats.chisquare(np.bincount(idx, minlength=3)).pvalue > 0.01


def test_lambda_segment_values():
    assert ISO.lambda_segment([0.3, -0.4, 0.866]) == pytest.approx(0.5)
    assert AXIS.lambda_segment([1, 0, 0]) == pytest.approx(1 / 3)
    assert AXIS.lambda_segment(np.ones(3) / math.sqrt(3)) == pytest.approx(1 / math.sqrt(3))


def test_lambda_polytope_values():
    cube = ConvexPolytope.box()
    assert ISO.lambda_polytope(Segment3(np.zeros(3), np.array([1.0, 0, 0]))) == pytest.approx(0.5)
    assert ISO.lambda_polytope(cube) == pytest.approx(1.5, rel=1e-9)
    assert AXIS.lambda_polytope(cube) == pytest.approx(1.0)


def test_cube_mean_width_against_angular_quadrature():
    # uniform half-sphere average of the width |u1|+|u2|+|u3|
    f = lambda ph, th: (abs(math.sin(th) * math.cos(ph)) + abs(math.sin(th) * math.sin(ph))
                        + abs(math.cos(th))) * math.sin(th)
    val, _ = integrate.dblquad(f, 0, math.pi / 2, 0, 2 * math.pi)
    assert ISO.lambda_polytope(ConvexPolytope.box()) == pytest.approx(val / (2 * math.pi),
                                                                      rel=1e-6)


def test_zeta_constants():
    assert ISO.zeta_constants() == pytest.approx((math.pi / 4, math.pi / 8))
    assert AXIS.zeta_constants() == pytest.approx((2 / 3, 2 / 9))


def test_zeta3_small_but_positive_near_great_circle():
    atoms = [[1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1]]
    m = DirectionalModel.discrete(atoms, [0.3333, 0.3333, 0.3333, 1e-4])
    z2, z3 = m.zeta_constants()
    assert 0 < z3 < 1e-3 and z2 > 0.1


def test_span_condition_enforced():
    with pytest.raises(ModelError):
        DirectionalModel.discrete([[1, 0, 0], [0, 1, 0]])
    with pytest.raises(ModelError):
        DirectionalModel.discrete([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0.5, 0.5, 0.1])


def test_model_dict_round_trip_and_unknown_keys():
    for m in (ISO, AXIS):
        assert DirectionalModel.from_dict(m.to_dict()).to_dict() == m.to_dict()
    with pytest.raises(ModelError):
        DirectionalModel.from_dict({"type": "isotropic", "foo": 1})


def test_isotropic_typical_direction_is_uniform():
    u = ISO.sample_directional_laws("typ", np.random.default_rng(3), 20000)
    assert stats.kstest(u[:, 2], "uniform").pvalue > 0.01


def test_axis_edge_laws_equal_atoms():
    for which in ("tilde", "typ"):
        atoms, w = AXIS.edge_direction_law(which)
        assert np.allclose(np.abs(atoms).max(axis=1), 1)
        assert sorted(np.argmax(np.abs(atoms), axis=1)) == [0, 1, 2]
        assert np.allclose(w, 1 / 3)


def test_hitting_plane_axis_model_on_cube():
    rng = np.random.default_rng(4)
    cube = ConvexPolytope.box()
    offs = []
    for _ in range(2000):
        h = AXIS.sample_hitting_hyperplane(cube, rng)
        assert np.isclose(np.abs(h.normal).max(), 1)
        offs.append(h.offset * h.normal.sum())
    assert stats.kstest(offs, "uniform").pvalue > 0.01


def test_hitting_plane_isotropic_cap_fraction():
    # width-weighted normal law on the cube; fraction within pi/6 of e3
    rng = np.random.default_rng(5)
    cube = ConvexPolytope.box()
    n = 10 ** 5
    nz = np.array([abs(ISO.sample_hitting_hyperplane(cube, rng).normal[2]) for _ in range(n)])
    hit = (nz >= math.cos(math.pi / 6)).astype(float)

    def width(th, ph):
        return (abs(math.sin(th) * math.cos(ph)) + abs(math.sin(th) * math.sin(ph))
                + abs(math.cos(th))) * math.sin(th)

    cap, _ = integrate.dblquad(lambda th, ph: width(th, ph), 0, 2 * math.pi, 0, math.pi / 6)
    full, _ = integrate.dblquad(lambda th, ph: width(th, ph), 0, 2 * math.pi, 0, math.pi / 2)
    p = cap / full
    assert abs(hit.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_hitting_plane_always_hits_thin_slab():
    rng = np.random.default_rng(6)
    slab = ConvexPolytope.box((0, 0, 0), (1, 1, 1e-3))
    for m in (ISO, AXIS):
        for _ in range(500):
            h = m.sample_hitting_hyperplane(slab, rng)
            d = h.signed_distance(slab.vertices)
            assert d.min() < 0 < d.max()


@settings(max_examples=50, deadline=None)
@given(unit_vectors, st.floats(0.01, 10))
def test_segment_homogeneity(u, L):
    for m in (ISO, AXIS):
        seg = Segment3(np.zeros(3), L * u)
        assert m.lambda_polytope(seg) == pytest.approx(L * m.lambda_segment(u), rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(unit_vectors)
def test_canonical_direction_is_sign_invariant(u):
    assert np.allclose(canonical_direction(u), canonical_direction(-u))


def test_hyperplane_normalises():
    h = Hyperplane.make(2.0, [0, 0, 2])
    assert np.allclose(h.normal, [0, 0, 1]) and h.offset == pytest.approx(1.0)
