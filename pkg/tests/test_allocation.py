import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwb_dynroles.allocation import (
    AllocationConfig,
    ConfigurationError,
    allocate_roles,
    choose_active_count,
    reallocation_trace,
    tdoa_cost,
)
from uwb_dynroles.core import Dimension, Role, RoleAssignment, convex_envelope_contains

EXAMPLE = {1: (0, 0), 2: (4, 0), 3: (2, 3), 4: (2, 1)}


def brute_force(positions, k):
    """Straight transcription of the cost: loop over subsets, triangles and listeners."""
    best, best_set = None, None
    nodes = sorted(positions)
    for subset in itertools.combinations(nodes, k):
        total = 0.0
        for tri in itertools.combinations(subset, 3):
            cx = sum(positions[t][0] for t in tri) / 3
            cy = sum(positions[t][1] for t in tri) / 3
            for l in nodes:
                if l not in subset:
                    total += (cx - positions[l][0]) ** 2 + (cy - positions[l][1]) ** 2
        if best is None or total < best - 1e-12 * max(abs(best), 1.0):
            best, best_set = total, subset
    return best_set, best


def cfg(k, **kw):
    return AllocationConfig(k=k, min_frequency=1.0, **kw)


def test_example_costs():
    assert tdoa_cost((1, 2, 3), EXAMPLE) == pytest.approx(0.0, abs=1e-12)
    assert tdoa_cost((1, 2, 4), EXAMPLE) == pytest.approx((8 / 3) ** 2)
    a, report = allocate_roles(EXAMPLE, cfg(3))
    assert a.active == (1, 2, 3) and a.listeners == {4}
    costs = dict(report.costs)
    assert sorted(round(c, 3) for c in costs.values()) == [0.0, 7.111, 8.889, 8.889]
    assert report.evaluated_count == 4


def test_equilateral_centre():
    h = math.sqrt(3)
    pos = {0: (0, 0), 1: (2, 0), 2: (1, h), 3: (1, h / 3)}
    assert tdoa_cost((0, 1, 2), pos) == pytest.approx(0.0, abs=1e-12)


def test_coincident_nodes_tie_break():
    pos = {i: (1.0, 1.0) for i in range(6)}
    a, _ = allocate_roles(pos, cfg(4))
    assert a.active == (0, 1, 2, 3)


def test_matches_brute_force_n6():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pos = {i: tuple(rng.uniform(0, 6, 2)) for i in range(6)}
        a, _ = allocate_roles(pos, cfg(4), keep_costs=False)
        assert a.active == brute_force(pos, 4)[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 8), st.integers(3, 5), st.integers(0, 2**32 - 1))
def test_argmin_property(n, k, seed):
    if k > n:
        return
    rng = np.random.default_rng(seed)
    pos = {i: tuple(rng.uniform(-5, 5, 2)) for i in range(n)}
    a, report = allocate_roles(pos, cfg(k))
    chosen = tdoa_cost(a.active, pos)
    for subset, c in report.costs:
        assert chosen <= c + 1e-9 * max(1.0, c)
    assert set(a.active) | a.listeners == set(range(n))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2 * math.pi), st.floats(0.1, 10))
def test_rigid_motion_and_scale_invariance(seed, theta, scale):
    rng = np.random.default_rng(seed)
    pos = {i: rng.uniform(0, 6, 2) for i in range(6)}
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shift = rng.uniform(-100, 100, 2)
    moved = {i: scale * (R @ p) + shift for i, p in pos.items()}
    a, ra = allocate_roles(pos, cfg(4))
    b, rb = allocate_roles(moved, cfg(4))
    costs_a = np.array([c for _, c in ra.costs])
    costs_b = np.array([c for _, c in rb.costs])
    assert np.allclose(costs_b, costs_a * scale**2, rtol=1e-8, atol=1e-9)
    gap = np.sort(costs_a)[1] - np.sort(costs_a)[0]
    if gap > 1e-6 * max(1.0, costs_a.max()):
        assert a.active == b.active


def test_interior_preference_single_listener():
    rng = np.random.default_rng(5)
    pts = {i: rng.uniform(0, 6, 2) for i in range(4)}
    a, _ = allocate_roles(pts, cfg(3))
    (l,) = a.listeners
    best = min(
        itertools.combinations(range(4), 3),
        key=lambda tri: np.linalg.norm(np.mean([pts[t] for t in tri], axis=0) - pts[[i for i in range(4) if i not in tri][0]]),
    )
    assert a.active == best


@pytest.mark.parametrize("fmin, rate, n, k", [(10, 100, 8, 5), (10, 60, 6, 4)])
def test_choose_active_count(fmin, rate, n, k):
    assert choose_active_count(fmin, rate, n) == k


def test_choose_active_count_infeasible():
    with pytest.raises(ConfigurationError):
        choose_active_count(10, 10, 6, Dimension.PLANAR)


def test_config_check():
    with pytest.raises(ConfigurationError):
        AllocationConfig(k=5, min_frequency=10, pair_rate=60).check()
    with pytest.raises(ConfigurationError):
        AllocationConfig(k=3, min_frequency=1).check(Dimension.SPATIAL)
    AllocationConfig(k=4, min_frequency=10, pair_rate=60).check()


def test_budget_guard_keeps_previous():
    pos = {i: (float(i), float(i % 3)) for i in range(10)}
    prev = RoleAssignment.from_active((0, 1, 2, 3), 10, epoch=4)
    a, report = allocate_roles(pos, cfg(4, enumeration_budget=100), prev)
    assert a.active == prev.active and a.epoch == 5
    assert report.skipped and report.evaluated_count == 0
    with pytest.raises(ConfigurationError):
        allocate_roles(pos, cfg(4, enumeration_budget=100))


def test_k_larger_than_n():
    with pytest.raises(ConfigurationError):
        allocate_roles({0: (0, 0), 1: (1, 0), 2: (0, 1)}, cfg(4))


def test_hysteresis_keeps_previous_until_margin():
    pos = {**EXAMPLE, 4: (2.0, 1.4)}
    prev = RoleAssignment.from_active((1, 2, 4), 4)
    best = tdoa_cost((1, 2, 3), pos)
    gain = 1 - best / tdoa_cost(prev.active, pos)  # relative improvement of the argmin
    kept, report = allocate_roles(pos, cfg(3, hysteresis_margin=gain + 0.05), prev)
    assert kept.active == (1, 2, 4) and report.kept_previous
    switched, report = allocate_roles(pos, cfg(3, hysteresis_margin=gain - 0.05), prev)
    assert switched.active == (1, 2, 3) and not report.kept_previous
    default, _ = allocate_roles(pos, cfg(3), prev)
    assert default.active == (1, 2, 3)


def test_cost_report_json():
    _, report = allocate_roles(EXAMPLE, cfg(3))
    d = json.loads(report.to_json())
    assert d["chosen"] == [1, 2, 3]
    assert len(d["costs"]) == 4


def test_reallocation_trace_constant():
    a = RoleAssignment.from_active((0, 1, 2), 4)
    trace = reallocation_trace([RoleAssignment(a.active, a.listeners, e) for e in range(5)], 3)
    assert trace == [(e, Role.LISTENER) for e in range(5)]


def test_reallocation_trace_empty():
    with pytest.raises(ValueError):
        reallocation_trace([], 0)


def test_reallocation_trace_hull_entry():
    square = {0: (0, 0), 1: (4, 0), 2: (4, 3), 3: (0, 3)}
    xs = np.arange(8.0, 0.9, -0.25)
    history, prev = [], None
    for epoch, x in enumerate(xs):
        pos = {**square, 4: (x, 1.5)}
        prev, _ = allocate_roles(pos, cfg(3), prev, epoch=epoch)
        history.append(prev)
    trace = reallocation_trace(history, 4)
    crossing = next(e for e, x in enumerate(xs) if convex_envelope_contains(list(square.values()), (x, 1.5)))
    flip = next(e for e, role in trace if role is Role.LISTENER)
    assert trace[0][1] is Role.ACTIVE
    assert abs(flip - crossing) <= 1
    assert all(role is Role.LISTENER for _, role in trace[flip:])
