"""Per-sample metrics, smoothing, box-plot statistics and the metrics CSV format."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from ..allocation import AllocationConfig, allocate_roles
from ..core import Dimension, NodeId, Role, convex_envelope_contains

CSV_COLUMNS = (
    "time", "node", "mode", "role", "in_hull", "raw_error", "tracking_error",
    "est_x", "est_y", "est_z", "true_x", "true_y", "true_z",
)
SEGMENTS = ("all", "switch", "hull_exit")


@dataclass(frozen=True)
class MetricsRecord:
    time: float
    node: NodeId
    mode: str
    role: Role
    in_hull: bool
    raw_error: float
    tracking_error: float
    est: tuple[float, float, float]
    true: tuple[float, float, float]

    def __post_init__(self):
        if self.raw_error < 0 or self.tracking_error < 0:
            raise ValueError("errors must be non-negative")


def apply_smoothing(series, alpha: float | None) -> np.ndarray:
    """Exponentially weighted moving average along axis 0; ``alpha=1`` is the identity."""
    x = np.asarray(series, dtype=float)
    if alpha is None or alpha == 1.0:
        return x.copy()
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    out = np.empty_like(x)
    if len(x) == 0:
        return out
    out[0] = x[0]
    for i in range(1, len(x)):
        out[i] = alpha * x[i] + (1.0 - alpha) * out[i - 1]
    return out


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _f(v: float) -> str:
    return f"{v:.6f}"


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([
            _f(r.time), r.node, r.mode, r.role.value, "true" if r.in_hull else "false",
            _f(r.raw_error), _f(r.tracking_error), *map(_f, r.est), *map(_f, r.true),
        ])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(MetricsRecord(
            time=float(row["time"]),
            node=int(row["node"]),
            mode=row["mode"],
            role=Role(row["role"]),
            in_hull=row["in_hull"] == "true",
            raw_error=float(row["raw_error"]),
            tracking_error=float(row["tracking_error"]),
            est=(float(row["est_x"]), float(row["est_y"]), float(row["est_z"])),
            true=(float(row["true_x"]), float(row["true_y"]), float(row["true_z"])),
        ))
    return out


# ---------------------------------------------------------------------------
# Box statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxStats:
    """Tukey box plot: quartiles by linear interpolation, whiskers at the
    furthest samples within 1.5 IQR of the box."""

    count: int
    median: float
    q1: float
    q3: float
    mean: float
    whisker_low: float | None
    whisker_high: float | None
    outliers: tuple[float, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = len(self.outliers)
        return d


def box_stats(values: Sequence[float]) -> BoxStats | None:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return None
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    if v.size == 1:
        return BoxStats(1, med, q1, q3, float(v[0]), None, None, ())
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxStats(int(v.size), med, q1, q3, float(v.mean()), float(inside.min()), float(inside.max()), outliers)


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------


def _truth_by_time(records: Sequence[MetricsRecord]) -> dict[float, dict[NodeId, tuple]]:
    out: dict[float, dict[NodeId, tuple]] = defaultdict(dict)
    for r in records:
        out[r.time][r.node] = r.true
    return dict(sorted(out.items()))


def ideal_roles(
    records: Sequence[MetricsRecord], k: int, budget: int = 1_000_000
) -> dict[float, dict[NodeId, Role]] | None:
    """Roles the allocator would pick from ground truth at every sample time.

    Returns None when enumerating every sample time would exceed ``budget``
    subset evaluations.
    """
    truth = _truth_by_time(records)
    if not truth:
        return {}
    n = max(len(v) for v in truth.values())
    if k > n or math.comb(n, k) * len(truth) > budget:
        return None
    cfg = AllocationConfig(k=k, enumeration_budget=budget)
    out = {}
    for t, pos in truth.items():
        if len(pos) < n:
            continue
        a, _ = allocate_roles(pos, cfg, keep_costs=False)
        out[t] = {i: a.role_of(i) for i in pos}
    return out


def switch_windows(ideal: dict[float, dict[NodeId, Role]], window: float) -> dict[NodeId, list[float]]:
    """Times at which each node's ideal role changes."""
    changes: dict[NodeId, list[float]] = defaultdict(list)
    prev: dict[NodeId, Role] = {}
    for t, roles in ideal.items():
        for i, role in roles.items():
            if i in prev and prev[i] != role:
                changes[i].append(t)
            prev[i] = role
    return dict(changes)


def outside_network(records: Sequence[MetricsRecord], dim: Dimension = Dimension.PLANAR) -> set[tuple[float, NodeId]]:
    """(time, node) samples where the node is outside the hull of every other node's true position."""
    out = set()
    for t, pos in _truth_by_time(records).items():
        for i, p in pos.items():
            others = [q for j, q in pos.items() if j != i]
            if not convex_envelope_contains(others, p, dim):
                out.add((t, i))
    return out


def segment_records(
    records: Sequence[MetricsRecord],
    segment: str,
    *,
    k: int,
    switch_window: float = 1.0,
    dim: Dimension = Dimension.PLANAR,
    budget: int = 1_000_000,
    ideal: dict | None = None,
) -> list[MetricsRecord] | None:
    """Filter records to a segment.

    ``switch``: samples within ``switch_window`` seconds of a change in the
    node's ground-truth ideal role.  ``hull_exit``: samples where the node is
    outside the envelope of all other nodes.  Both are defined from ground
    truth only, so runs in different modes select the same instants.  None
    means the segment could not be evaluated.
    """
    if segment == "all":
        return list(records)
    if segment == "switch":
        ideal = ideal if ideal is not None else ideal_roles(records, k, budget)
        if ideal is None:
            return None
        changes = switch_windows(ideal, switch_window)
        return [
            r for r in records
            if any(abs(r.time - tc) <= switch_window + 1e-9 for tc in changes.get(r.node, ()))
        ]
    if segment == "hull_exit":
        outside = outside_network(records, dim)
        return [r for r in records if (r.time, r.node) in outside]
    raise ValueError(f"unknown segment {segment!r}")


def summarize(
    records: Sequence[MetricsRecord],
    *,
    k: int,
    focus: Iterable[NodeId] | None = None,
    switch_window: float = 1.0,
    dim: Dimension = Dimension.PLANAR,
    segments: Sequence[str] = SEGMENTS,
    budget: int = 1_000_000,
) -> dict:
    """Box statistics of raw and tracking error per mode and segment.

    Absent segments (nothing selected, or not computable) map to None.
    """
    if not records:
        raise ValueError("no records to summarise")
    focus = set(focus) if focus is not None else None
    by_mode: dict[str, list[MetricsRecord]] = defaultdict(list)
    for r in records:
        by_mode[r.mode].append(r)
    out: dict = {}
    for mode, recs in sorted(by_mode.items()):
        ideal = ideal_roles(recs, k, budget) if "switch" in segments else None
        out[mode] = {}
        for seg in segments:
            sel = segment_records(recs, seg, k=k, switch_window=switch_window, dim=dim, budget=budget, ideal=ideal)
            if sel is not None and focus is not None:
                sel = [r for r in sel if r.node in focus]
            if not sel:
                out[mode][seg] = None
                continue
            out[mode][seg] = {
                "raw_error": box_stats([r.raw_error for r in sel]),
                "tracking_error": box_stats([r.tracking_error for r in sel]),
                "by_role": {
                    role.value: box_stats([r.raw_error for r in sel if r.role is role])
                    for role in Role
                },
            }
    return out


def summary_to_json(summary: dict) -> dict:
    """JSON-friendly copy of :func:`summarize` output."""

    def conv(x):
        if isinstance(x, BoxStats):
            return x.to_dict()
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x

    return conv(summary)


def roles_to_csv(assignments: Iterable) -> str:
    """One ``epoch,node,role`` row per node per allocation epoch."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "node", "role"))
    for a in assignments:
        for node in sorted(a.nodes):
            w.writerow((a.epoch, node, a.role_of(node).value))
    return buf.getvalue()


def roles_from_csv(text: str) -> list[tuple[int, NodeId, Role]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != ("epoch", "node", "role"):
        raise ValueError(f"unexpected roles columns {reader.fieldnames}")
    return [(int(r["epoch"]), int(r["node"]), Role(r["role"])) for r in reader]
