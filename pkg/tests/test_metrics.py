import numpy as np
import pytest

from uwb_dynroles.core import Role, RoleAssignment
from uwb_dynroles.sim.metrics import (
    CSV_COLUMNS,
    MetricsRecord,
    apply_smoothing,
    box_stats,
    records_from_csv,
    records_to_csv,
    roles_from_csv,
    roles_to_csv,
    segment_records,
    summarize,
    summary_to_json,
)


def rec(t, node=0, err=0.1, role=Role.LISTENER, true=(0.0, 0.0, 0.0), mode="dynamic", in_hull=True):
    return MetricsRecord(t, node, mode, role, in_hull, err, err / 2, tuple(true), tuple(true))


def test_smoothing_identity_and_fixed_point():
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert np.array_equal(apply_smoothing(x, 1.0), x)
    assert np.array_equal(apply_smoothing(x, None), x)
    c = np.full(40, 2.5)
    assert np.allclose(apply_smoothing(c, 0.2), c)
    with pytest.raises(ValueError):
        apply_smoothing(x, 0.0)


def test_smoothing_variance_reduction():
    x = np.random.default_rng(1).normal(size=10_000)
    alpha = 0.1
    ratio = apply_smoothing(x, alpha)[200:].var() / x.var()
    assert ratio == pytest.approx(alpha / (2 - alpha), rel=0.15)


def test_box_stats_examples():
    s = box_stats([1, 2, 3, 4, 5])
    assert (s.median, s.q1, s.q3) == (3, 2, 4)
    assert (s.whisker_low, s.whisker_high, s.outliers) == (1, 5, ())
    one = box_stats([0.7])
    assert one.median == 0.7 and one.whisker_low is None and one.whisker_high is None
    assert box_stats([]) is None


def test_box_stats_outliers():
    s = box_stats([1, 2, 3, 4, 5, 100])
    assert s.outliers == (100.0,) and s.whisker_high == 5


def test_csv_roundtrip():
    rs = [rec(0.1 * i, node=i % 3, err=0.123456789 * i, role=Role(["active", "listener"][i % 2]),
              true=(i, -i, 0.3), in_hull=bool(i % 2)) for i in range(10)]
    text = records_to_csv(rs)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    back = records_from_csv(text)
    assert records_to_csv(back) == text
    assert back[3].raw_error == pytest.approx(0.370370, abs=1e-6)
    with pytest.raises(ValueError):
        records_from_csv("a,b\n1,2\n")


def test_roles_csv_roundtrip():
    hist = [RoleAssignment.from_active((0, 1, 2), 4, e) for e in range(3)]
    text = roles_to_csv(hist)
    rows = roles_from_csv(text)
    assert len(rows) == 12 and rows[3] == (0, 3, Role.LISTENER)


def test_negative_error_rejected():
    with pytest.raises(ValueError):
        MetricsRecord(0, 0, "m", Role.ACTIVE, True, -1.0, 0.0, (0, 0, 0), (0, 0, 0))


def _walk(xs, mode="dynamic"):
    square = [(0, 0, 0), (4, 0, 0), (4, 3, 0), (0, 3, 0)]
    out = []
    for i, x in enumerate(xs):
        t = round(0.1 * i, 6)
        for n, p in enumerate(square):
            out.append(rec(t, n, 0.05, Role.ACTIVE, p, mode))
        out.append(rec(t, 4, 0.2 if x > 4 else 0.1, Role.LISTENER, (x, 1.5, 0), mode))
    return out


def test_switch_segment_constant_role_is_absent():
    records = _walk([2.0] * 30)
    assert segment_records(records, "switch", k=3) == []
    s = summarize(records, k=3, focus=[4])
    assert s["dynamic"]["switch"] is None
    assert s["dynamic"]["all"]["raw_error"].median == pytest.approx(0.1)


def test_switch_and_hull_exit_segments():
    xs = list(np.linspace(8, 1, 71))
    records = _walk(xs)
    sw = segment_records(records, "switch", k=3, switch_window=0.5)
    times = sorted({r.time for r in sw if r.node == 4})
    assert times and times[-1] - times[0] <= 1.0 + 1e-9
    ex = segment_records(records, "hull_exit", k=3)
    assert {r.node for r in ex} >= {4}
    assert all(r.true[0] > 4 for r in ex if r.node == 4)
    with pytest.raises(ValueError):
        segment_records(records, "bogus", k=3)


def test_summarize_per_mode_and_json():
    records = _walk([2.0] * 5, "tof_only") + _walk([2.0] * 5, "dynamic")
    s = summarize(records, k=3, focus=[4])
    assert set(s) == {"dynamic", "tof_only"}
    j = summary_to_json(s)
    assert j["dynamic"]["all"]["raw_error"]["median"] == pytest.approx(0.1)
    assert j["dynamic"]["all"]["by_role"]["active"] is None
    with pytest.raises(ValueError):
        summarize([], k=3)


def test_switch_segment_budget():
    records = _walk([2.0] * 3)
    assert segment_records(records, "switch", k=3, budget=2) is None
