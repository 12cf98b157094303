import math

import numpy as np
import pytest

from stitsim.directional import DirectionalModel, Hyperplane
from stitsim.engine import (EventCapExceeded, _Engine, collect_complete_segments, linear_section,
                            nest, simulate)

ISO = DirectionalModel.isotropic()
AXIS = DirectionalModel.axis()
CUBE = ((0, 0, 0), (1, 1, 1))


def engine():
    return _Engine(np.zeros(3), np.ones(3), AXIS)


def test_tiny_time_gives_empty_registries():
    r = simulate(CUBE, 1e-9, ISO, seed=1)
    assert r.polygons == [] and r.segments == [] and r.vertices == []
    assert len(r.cells) == 1 and r.cells[0].volume() == pytest.approx(1)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        simulate(CUBE, 0.0, ISO, seed=1)
    with pytest.raises(ValueError):
        simulate(CUBE, 1.0, ISO, seed=1, method="bogus")
    with pytest.raises(ValueError):
        nest(CUBE, 0.0, 1.0, ISO, seed=1)


def test_first_split():
    eng = engine()
    eng.apply_split(0, Hyperplane.make(0.5, [0, 0, 1]), 1.0)
    assert len(eng.polygons) == 1 and len(eng.segments) == 4
    assert all(s.window_carried and s.censored for s in eng.segments)
    assert eng.vertices == []


def test_second_split_on_one_half():
    eng = engine()
    a, b = eng.apply_split(0, Hyperplane.make(0.5, [0, 0, 1]), 1.0)
    lower = a if eng.cells[a].vertices[:, 2].max() <= 0.5 + 1e-12 else b
    eng.apply_split(lower, Hyperplane.make(0.5, [1, 0, 0]), 2.0)
    new = [s for s in eng.segments if s.polygon_id == 1]
    carried = [s for s in new if not s.window_carried]
    assert len(carried) == 1 and carried[0].carrier_birth == 1.0
    # its endpoints lie on the window, so no interior vertices anywhere
    assert carried[0].interior_vertices == []
    # the T vertices land on the first polygon's window-carried sides, at the boundary
    assert all(v.kind == "T" and v.on_boundary for v in eng.vertices)


def test_three_split_scenario_single_X():
    eng = engine()
    a, b = eng.apply_split(0, Hyperplane.make(0.5, [0, 0, 1]), 1.0)
    upper, lower = (a, b) if eng.cells[a].vertices[:, 2].min() >= 0.5 - 1e-12 else (b, a)
    eng.apply_split(lower, Hyperplane.make(0.5, [1, 0, 0]), 2.0)
    eng.apply_split(upper, Hyperplane.make(0.5, [0, 1, 0]), 3.0)
    X = [v for v in eng.vertices if v.kind == "X"]
    assert len(X) == 1 and np.allclose(X[0].point, [0.5, 0.5, 0.5])
    segs = [eng.segments[i] for i in X[0].segment_ids]
    assert {s.carrier_id for s in segs} == {0}
    assert sorted(s.birth for s in segs) == [2.0, 3.0]
    # the later segment already has the X vertex at its birth
    late = max(segs, key=lambda s: s.birth)
    assert late.n_X_birth == 1 and min(segs, key=lambda s: s.birth).n_X_birth == 0
    # every T vertex sits on a window-carried segment at the window boundary
    for v in eng.vertices:
        if v.kind == "T":
            assert v.on_boundary
            assert all(eng.segments[i].window_carried for i in v.segment_ids)


@pytest.fixture(scope="module")
def run10():
    return simulate(CUBE, 10.0, ISO, seed=7, checkpoint_every=20)


def test_volume_tiling_and_checkpoints(run10):
    assert sum(c.volume() for c in run10.cells) == pytest.approx(1, rel=1e-9)
    assert run10.checkpoints
    for cp in run10.checkpoints:
        assert cp["volume_sum"] == pytest.approx(1, rel=1e-9) and cp["min_volume"] > 0


def test_event_times_increase(run10):
    times = [e[0] for e in run10.event_log]
    assert all(a < b for a, b in zip(times, times[1:]))
    assert 0 < times[0] and times[-1] < 10


def test_registry_contracts(run10):
    for s in run10.segments:
        assert s.carrier_birth < s.birth or s.window_carried
        taus = [v[0] for v in s.interior_vertices]
        assert all(0 < x < 1 for x in taus)
    for v in run10.vertices:
        assert len(v.segment_ids) == (1 if v.kind == "T" else 2)
    # each polygon has >= 3 sides and its segments are born with it
    for p in run10.polygons:
        assert len(p.segment_ids) >= 3
        assert all(run10.segments[i].birth == p.birth for i in p.segment_ids)


def test_complete_segments_contract(run10):
    got = collect_complete_segments(run10, 0.05)
    assert got
    for s in got:
        assert s.carrier_birth < s.birth and not s.censored
        for p in (s.p0, s.p1):
            assert np.all(p > 0) and np.all(p < 1)
    with pytest.raises(ValueError):
        collect_complete_segments(run10, 0.6)


def test_margin_zero_single_split_is_empty():
    eng = engine()
    eng.apply_split(0, Hyperplane.make(0.3, [1, 1, 1]), 0.5)
    assert collect_complete_segments(eng.result(1.0, seed=0), 0.0) == []


def test_determinism():
    a = simulate(CUBE, 6.0, ISO, seed=3)
    b = simulate(CUBE, 6.0, ISO, seed=3)
    assert a.event_log == b.event_log
    assert [s.interior_vertices for s in a.segments] == [s.interior_vertices for s in b.segments]


def test_event_cap():
    with pytest.raises(EventCapExceeded):
        simulate(CUBE, 10.0, ISO, seed=3, max_events=5)


def test_linear_section_axis_line_hits():
    r = simulate(CUBE, 10.0, AXIS, seed=4)
    hits, (x_in, x_out) = linear_section(r, [0.0, 0.37, 0.61], [1, 0, 0])
    assert (x_in, x_out) == pytest.approx((0.0, 1.0))
    assert np.all(np.diff(hits) > 0)
    # with axis planes, the hits are exactly the x = const polygons crossing the line
    expected = []
    for p in r.polygons:
        if abs(p.plane.normal[0]) == 1:
            x = p.plane.offset * p.plane.normal[0]
            ys, zs = p.vertices[:, 1], p.vertices[:, 2]
            if ys.min() < 0.37 < ys.max() and zs.min() < 0.61 < zs.max():
                expected.append(x)
    assert np.allclose(hits, sorted(expected))


def test_linear_section_intensity_axis_model():
    # axis model: planes perpendicular to e1 have intensity t/3
    rng = np.random.default_rng(0)
    n, L = 0, 0.0
    for seed in range(40):
        r = simulate(CUBE, 10.0, AXIS, seed=seed)
        for _ in range(10):
            p = np.array([0.0, *rng.random(2)])
            hits, (a, b) = linear_section(r, p, [1, 0, 0])
            n += len(hits)
            L += b - a
    rate = n / L
    assert rate == pytest.approx(10 / 3, rel=0.15)


def test_nest_small_u_matches_simulate_phase0():
    a = nest(CUBE, 5.0, 1e-9, ISO, seed=2)
    assert all(p.phase_tag == 0 for p in a.polygons)
    assert a.phase_times == (5.0, 1e-9)
    assert sum(c.volume() for c in a.cells) == pytest.approx(1, rel=1e-9)


def test_nest_phase_tags_and_birth_ranges():
    r = nest(CUBE, 4.0, 4.0, ISO, seed=5, checkpoint_every=10)
    for p in r.polygons:
        assert (p.birth <= 4.0) == (p.phase_tag == 0)
    assert all(cp["volume_sum"] == pytest.approx(1, rel=1e-9) for cp in r.checkpoints)


def test_rejection_method_runs_and_tiles():
    r = simulate(CUBE, 6.0, ISO, seed=9, method="rejection")
    assert r.method == "rejection"
    assert sum(c.volume() for c in r.cells) == pytest.approx(1, rel=1e-9)


def test_scale_invariance_exact():
    # same seed: Y(t) in W and Y(t/n) in nW are rescaled copies of each other
    a = simulate(CUBE, 8.0, ISO, seed=21)
    b = simulate(((0, 0, 0), (2, 2, 2)), 4.0, ISO, seed=21)
    assert len(a.polygons) == len(b.polygons)
    assert [s.n_T + s.n_X for s in a.segments] == [s.n_T + s.n_X for s in b.segments]
    assert math.isclose(sum(p.area for p in b.polygons), 4 * sum(p.area for p in a.polygons),
                        rel_tol=1e-9)
