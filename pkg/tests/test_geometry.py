import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twinbranch.automaton import SCHEMES, build_topology
from twinbranch.geometry import (
    DegenerateGeometryError,
    DofVector,
    GeometrySpec,
    extend_level,
    geometry_from_json,
    geometry_to_json,
    initial_geometry,
    layout_for,
    regions,
    trace_profile,
    validate,
)

from conftest import random_geometry, random_spec


@pytest.mark.parametrize("name", list(SCHEMES))
@pytest.mark.parametrize("K", range(1, 7))
def test_initial_geometry_is_feasible(name, K):
    top = build_topology(name, K)
    spec = random_spec(name, K, np.random.default_rng(K))
    assert validate(top, spec, initial_geometry(top, spec)) is None


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(SCHEMES)), st.integers(1, 5), st.integers(0, 2**31))
def test_random_geometry_is_feasible(name, K, seed):
    rng = np.random.default_rng(seed)
    top = build_topology(name, K)
    spec = random_spec(name, K, rng)
    assert validate(top, spec, random_geometry(top, spec, rng)) is None


def test_spec_validation():
    with pytest.raises(ValueError):
        GeometrySpec("NEW", 3, theta=0.5, l=0.2)
    with pytest.raises(ValueError):
        GeometrySpec("NEW", 3, theta=0.3, l=0.6, L=0.5)
    with pytest.raises(ValueError):
        GeometrySpec("NEW", 3, theta=0.3, l=0.2, N=0.0)
    with pytest.raises(ValueError):
        GeometrySpec("NEW", 0, theta=0.3, l=0.2)


def test_level_lines_and_widths():
    spec = GeometrySpec("NEW", 6, theta=0.27, l=0.15)
    widths = sum(spec.width(k) for k in range(1, 7))
    assert abs(widths - (spec.l - spec.x(6))) < 1e-15
    assert all(spec.x(k) > spec.x(k + 1) for k in range(6))


def test_validate_detects_crossing(rng):
    top = build_topology("NEW", 3)
    spec = random_spec("NEW", 3, rng)
    Y = initial_geometry(top, spec)
    line = Y.lines[3].copy()
    line[[1, 2]] = line[[2, 1]]
    Y.lines[3] = line
    rep = validate(top, spec, Y)
    assert rep is not None and rep.line == 3


def test_validate_detects_loose_tied_tip():
    top = build_topology("NEW", 4)
    lay = layout_for(top)
    spec = GeometrySpec("NEW", 4, theta=0.27, l=0.15)
    Y = initial_geometry(top, spec)
    v = Y.flat()
    shared = np.flatnonzero((lay.src >= 0) & (lay.owner[np.maximum(lay.src, 0)] != np.arange(len(v))))
    assert len(shared), "expected nested needles sharing a tip line"
    v[shared[0]] += 1e-4
    bad = DofVector([v[lay.line(k)] for k in range(lay.K + 1)])
    assert validate(top, spec, bad) is not None


@pytest.mark.parametrize("name", list(SCHEMES))
def test_pack_unpack_roundtrip(name, rng):
    top = build_topology(name, 4)
    spec = random_spec(name, 4, rng)
    Y = random_geometry(top, spec, rng)
    lay = layout_for(top)
    assert np.array_equal(lay.unpack(lay.pack(Y)).flat(), Y.flat())


@pytest.mark.parametrize("name", list(SCHEMES))
def test_regions_tile_the_quarter_cell(name, rng):
    K = 4
    top = build_topology(name, K)
    spec = random_spec(name, K, rng)
    Y = random_geometry(top, spec, rng)
    regs = regions(top, spec, Y)
    area = sum(r.area for stripe in regs for r in stripe)
    assert abs(area - 0.25 * (spec.l - spec.x(K))) < 1e-13
    for stripe in regs:
        signs = [r.uy_sign for r in stripe]
        assert all(a == -b for a, b in zip(signs[:-1], signs[1:]))
        assert stripe[0].ux == 0.0


@pytest.mark.parametrize("name", list(SCHEMES))
def test_extension_keeps_old_levels(name, rng):
    K = 4
    top = build_topology(name, K)
    spec = random_spec(name, K, rng)
    Y = random_geometry(top, spec, rng, amp=0.1)
    top2 = build_topology(name, K + 1)
    spec2 = spec.replace(K=K + 1)
    Y2 = extend_level(top2, spec2, Y)
    assert validate(top2, spec2, Y2) is None
    for k in range(K):
        assert np.array_equal(Y2.lines[k], Y.lines[k])


@pytest.mark.parametrize("name", list(SCHEMES))
def test_trace_profile_symmetries(name, rng):
    K = 4
    top = build_topology(name, K)
    spec = random_spec(name, K, rng).replace(N=1.0)
    Y = random_geometry(top, spec, rng)
    for x in np.linspace(spec.x(K), spec.L, 13):
        p = trace_profile(top, spec, Y, float(x))
        y = np.linspace(0, 1, 401)
        u = p(y)
        assert np.allclose(p(1 - y), -u, atol=1e-13)  # odd about 1/2
        assert np.allclose(p(0.5 - y[y <= 0.5]), u[y <= 0.5], atol=1e-13)  # even about 1/4
        assert abs(p(0.0) - p(1.0)) < 1e-13


def test_trace_profile_repeats_for_integer_N(rng):
    top = build_topology("NEW", 3)
    spec = random_spec("NEW", 3, rng).replace(N=1.0)
    Y = random_geometry(top, spec, rng)
    x = 0.5 * (spec.x(3) + spec.x(2))
    one = trace_profile(top, spec, Y, x)
    three = trace_profile(top, spec.replace(N=3.0), Y, x)
    y = np.linspace(0, 1, 301)
    assert np.allclose(three(y / 3 + 1 / 3), one(y) / 3, atol=1e-13)
    assert abs(three.norm2() - one.norm2() / 9) < 1e-14


def test_trace_profile_norm_matches_quadrature(rng):
    top = build_topology("KM", 3)
    spec = random_spec("KM", 3, rng)
    Y = random_geometry(top, spec, rng)
    p = trace_profile(top, spec, Y, spec.x(3))
    y = (np.arange(200000) + 0.5) / 200000
    assert abs(np.mean(p(y) ** 2) - p.norm2()) < 1e-6 * p.norm2()


def test_trace_profile_rejects_outside():
    top = build_topology("NEW", 2)
    spec = GeometrySpec("NEW", 2, theta=0.27, l=0.15)
    with pytest.raises(ValueError):
        trace_profile(top, spec, initial_geometry(top, spec), 0.6)


@pytest.mark.parametrize("name", list(SCHEMES))
def test_geometry_json_roundtrip(name, rng):
    top = build_topology(name, 3)
    spec = random_spec(name, 3, rng)
    Y = random_geometry(top, spec, rng)
    text = geometry_to_json(spec, Y)
    top2, spec2, Y2 = geometry_from_json(text)
    assert spec2.as_dict() == spec.as_dict()
    assert np.array_equal(Y2.flat(), Y.flat())
    assert geometry_to_json(spec2, Y2) == text


def test_geometry_json_rejects_infeasible():
    top = build_topology("NEW", 2)
    spec = GeometrySpec("NEW", 2, theta=0.27, l=0.15)
    Y = initial_geometry(top, spec)
    Y.lines[2] = Y.lines[2][::-1].copy()
    with pytest.raises(DegenerateGeometryError):
        geometry_from_json(geometry_to_json(spec, Y))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(SCHEMES)), st.integers(1, 5), st.integers(0, 2**31), st.floats(0.0, 0.3))
def test_extension_of_any_feasible_geometry_is_feasible(name, K, seed, amp):
    rng = np.random.default_rng(seed)
    top = build_topology(name, K)
    spec = random_spec(name, K, rng)
    Y = random_geometry(top, spec, rng, amp=amp)
    top2 = build_topology(name, K + 1)
    spec2 = spec.replace(K=K + 1)
    assert validate(top2, spec2, extend_level(top2, spec2, Y)) is None


@pytest.mark.parametrize("name", list(SCHEMES))
def test_initial_geometry_feasible_at_full_depth(name):
    top = build_topology(name, 14)
    lo, hi = top.scheme.theta_admissible
    for theta in (lo * 1.001, hi * 0.999):
        spec = GeometrySpec(name, 14, theta=theta, l=0.2)
        assert validate(top, spec, initial_geometry(top, spec)) is None


def test_unbranched_trace_is_a_sawtooth():
    top = build_topology("NEW", 2)
    for N in (1.0, 2.0, 3.5):
        spec = GeometrySpec("NEW", 2, theta=0.27, l=0.2, L=0.5, N=N)
        p = trace_profile(top, spec, initial_geometry(top, spec), 0.3)
        assert p.norm2() == pytest.approx(1 / (48 * N**2), rel=1e-12)
        assert p(0.0) == 0.0 and p(0.5) == 0.0 and p(1.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-12, 1e-3))
def test_validate_is_monotone_in_tolerance(seed, delta):
    rng = np.random.default_rng(seed)
    top = build_topology("KM", 3)
    spec = random_spec("KM", 3, rng)
    Y = random_geometry(top, spec, rng, amp=0.99)
    if validate(top, spec, Y, delta) is None:
        assert validate(top, spec, Y, delta / 2) is None
