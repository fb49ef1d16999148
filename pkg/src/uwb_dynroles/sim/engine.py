"""Scenario runner: ranging cycles, position estimation, role allocation and metrics."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..allocation import CostReport, allocate_roles
from ..core import (
    ClockModel,
    NodeId,
    Position,
    Role,
    RoleAssignment,
    TdoaMeasurement,
    TofMeasurement,
    convex_envelope_contains,
)
from ..estimators import (
    EstimationFailed,
    FrameConvention,
    PositionEstimate,
    frame_transform,
    multilateration,
    tdoa_ls_estimator,
    to_frame,
)
from ..protocol import (
    EventLog,
    ExchangeFailed,
    ExchangeOutcome,
    MessageKind,
    MissingMeasurement,
    NodeTruth,
    ScheduleState,
    advance_schedule,
    compute_tof,
    pair_sequence,
    run_twr_exchange,
    tdoa_measurement,
)
from .metrics import MetricsRecord, apply_smoothing
from .scenario import Scenario
from .trajectory import distance_to_path

log = logging.getLogger(__name__)


class SimulationCollapse(RuntimeError):
    """The run cannot continue; ``result`` holds whatever was produced."""

    def __init__(self, message: str, result: "RunResult"):
        super().__init__(message)
        self.result = result


@dataclass
class RunResult:
    scenario: Scenario
    records: list[MetricsRecord] = field(default_factory=list)
    assignments: list[RoleAssignment] = field(default_factory=list)
    assignment_times: list[float] = field(default_factory=list)
    events: EventLog = field(default_factory=EventLog)
    cost_reports: list[CostReport] = field(default_factory=list)
    active_updates: dict[NodeId, list[float]] = field(default_factory=lambda: defaultdict(list))
    listener_updates: dict[NodeId, list[float]] = field(default_factory=lambda: defaultdict(list))
    init_end: float = 0.0
    end_time: float = 0.0
    cycles: int = 0
    tof_count: int = 0
    tdoa_count: int = 0
    failed_exchanges: int = 0
    estimator_failures: int = 0
    role_changes: int = 0

    def counters(self) -> dict:
        return {
            "cycles": self.cycles,
            "tof_measurements": self.tof_count,
            "tdoa_measurements": self.tdoa_count,
            "failed_exchanges": self.failed_exchanges,
            "estimator_failures": self.estimator_failures,
            "role_changes": self.role_changes,
            "init_end": self.init_end,
            "end_time": self.end_time,
        }

    def update_rate(self, node: NodeId, role: Role = Role.ACTIVE) -> float:
        """Estimate updates per second of ``node`` in ``role`` after initialisation."""
        times = (self.active_updates if role is Role.ACTIVE else self.listener_updates).get(node, [])
        span = self.end_time - self.init_end
        return len(times) / span if span > 0 else 0.0


class World:
    """Ground truth: node motion plus the per-node clocks drawn at start-up."""

    def __init__(self, scenario: Scenario, rng: np.random.Generator):
        self.scenario = scenario
        self.motion = {s.id: s.trajectory.motion(s.z) for s in scenario.nodes}
        cs = scenario.clocks
        self.clocks = {
            s.id: ClockModel(
                offset=float(rng.uniform(*cs.offset_range)),
                drift_ppm=float(rng.uniform(*cs.drift_ppm_range)),
                max_drift_ppm=cs.max_drift_ppm,
            )
            for s in scenario.nodes
        }

    def positions(self, t: float) -> dict[NodeId, np.ndarray]:
        return {i: m.at(t) for i, m in self.motion.items()}

    def truth(self, t: float) -> dict[NodeId, NodeTruth]:
        return {i: NodeTruth(m.at(t), self.clocks[i]) for i, m in self.motion.items()}


def step_world(scenario: Scenario, t: float) -> dict[NodeId, np.ndarray]:
    """Ground-truth position of every node at time ``t``."""
    if not 0.0 <= t <= scenario.duration:
        raise ValueError(f"t={t} outside [0, {scenario.duration}]")
    return {s.id: s.trajectory.position_at(t, s.z) for s in scenario.nodes}


@dataclass
class _Snapshot:
    time: float
    est_world: dict[NodeId, np.ndarray]
    roles: dict[NodeId, Role]
    active: tuple[NodeId, ...]


class _Runner:
    def __init__(self, scenario: Scenario, keep_costs: bool):
        self.sc = scenario
        self.keep_costs = keep_costs
        ss = np.random.SeedSequence(scenario.seed)
        clock_seq, medium_seq = ss.spawn(2)
        self.world = World(scenario, np.random.default_rng(clock_seq))
        self.rng = np.random.default_rng(medium_seq)
        self.medium = scenario.medium.runtime()
        self.timing = scenario.protocol.runtime()
        self.cfg = scenario.allocation.runtime()
        self.dim = scenario.dim
        self.heights = {s.id: s.z for s in scenario.nodes}
        self.slot = scenario.slot
        self.result = RunResult(scenario)
        self.slots = 0
        self.est: dict[NodeId, np.ndarray] = {}  # current frame coordinates
        self._rows: list[tuple] = []
        self._grid_index = 0
        self._snap: _Snapshot | None = None

    @property
    def t(self) -> float:
        # integer slot count avoids drift from summing 1/pair_rate
        return self.slots * self.slot

    # -- ranging -----------------------------------------------------------

    def _exchange(self, i, j, listeners, next_initiator, schedule):
        res = self.result
        try:
            rec = run_twr_exchange(
                i, j, self.world.truth(self.t), self.medium,
                timing=self.timing, listeners=listeners, start_time=self.t,
                rng=self.rng, next_initiator=next_initiator, log=res.events,
            )
            outcome = ExchangeOutcome.ACKED if rec.acked else ExchangeOutcome.ACK_TIMEOUT
        except ExchangeFailed:
            rec = None
            outcome = ExchangeOutcome.FAILED
            res.failed_exchanges += 1
        self.slots += 1
        return rec, advance_schedule(schedule, outcome)

    def run_cycle(self, active, listeners):
        pairs = pair_sequence(active)
        schedule = ScheduleState.for_active(active, self.timing)
        tofs: list[TofMeasurement] = []
        tdoas: dict[NodeId, list[TdoaMeasurement]] = defaultdict(list)
        listeners = sorted(listeners)
        for idx, (i, j) in enumerate(pairs):
            nxt = pairs[(idx + 1) % len(pairs)][0]
            recs = []
            rec, schedule = self._exchange(i, j, listeners, nxt, schedule)
            if rec is not None:
                recs.append(rec)
            if self.timing.double_sided:
                # Mirrored exchange in the following slot; both count for the pair.
                mirror, _ = self._exchange(j, i, listeners, nxt, ScheduleState(((j, i),)))
                if mirror is not None:
                    recs.append(mirror)
            if not recs:
                continue
            tof = float(np.mean([compute_tof(r) for r in recs]))
            stamp = self.t
            tofs.append(TofMeasurement((i, j), tof * self.medium.propagation_speed, stamp, any(r.t_init < r.t_resp for r in recs)))
            for rec in recs:
                for l in listeners:
                    try:
                        tdoas[l].append(tdoa_measurement(rec, l, tof, self.medium, stamp))
                    except MissingMeasurement:
                        pass
        self.result.tof_count += len(tofs)
        self.result.tdoa_count += sum(len(v) for v in tdoas.values())
        return tofs, tdoas

    # -- metrics -----------------------------------------------------------

    def _flush(self, until: float, inclusive: bool = False):
        snap = self._snap
        if snap is None:
            return
        dt = self.sc.timestep
        while True:
            g = self._grid_index * dt
            if g > self.sc.duration + 1e-12 or (g > until if inclusive else g >= until - 1e-12):
                break
            self._grid_index += 1
            if g < snap.time - 1e-12:
                continue
            truth = self.world.positions(g)
            for node in sorted(truth):
                role = snap.roles[node]
                anchors = [truth[a] for a in snap.active if a != node]
                inside = convex_envelope_contains(anchors, truth[node], self.dim)
                self._rows.append((g, node, role, inside, snap.est_world[node], truth[node]))

    def _snapshot(self, frame: FrameConvention, roles: Mapping[NodeId, Role], active):
        truth = self.world.positions(self.t)
        R, o = frame_transform(truth, frame, self.dim)
        world = {n: R.T @ q + o for n, q in self.est.items()}
        self._flush(self.t)
        self._snap = _Snapshot(self.t, world, dict(roles), tuple(active))

    def _finish_records(self):
        sc = self.sc
        by_node: dict[NodeId, list[int]] = defaultdict(list)
        for idx, row in enumerate(self._rows):
            by_node[row[1]].append(idx)
        tracking = [0.0] * len(self._rows)
        specs = sc.node_by_id
        for node, idxs in by_node.items():
            est = np.array([self._rows[i][4] for i in idxs])
            smooth = apply_smoothing(est, sc.smoothing)
            path, closed = specs[node].trajectory.reference_path(specs[node].z)
            for s, i in zip(smooth, idxs):
                if sc.tracking == "path":
                    tracking[i] = distance_to_path(s, path, closed)
                else:
                    tracking[i] = float(np.linalg.norm(s - self._rows[i][5]))
        self.result.records = [
            MetricsRecord(
                time=g, node=node, mode=sc.mode, role=role, in_hull=inside,
                raw_error=float(np.linalg.norm(est - true)), tracking_error=tracking[i],
                est=tuple(float(v) for v in est), true=tuple(float(v) for v in true),
            )
            for i, (g, node, role, inside, est, true) in enumerate(self._rows)
        ]

    # -- main loop ----------------------------------------------------------

    def _initialise(self):
        sc, res = self.sc, self.result
        nodes = list(range(sc.n))
        tofs, _ = self.run_cycle(nodes, [])
        frame = FrameConvention.from_nodes(nodes, self.dim)
        try:
            est = multilateration(tofs, frame, dim=self.dim, heights=self.heights)
        except EstimationFailed as exc:
            res.end_time = self.t
            raise SimulationCollapse(f"initial all-to-all multilateration failed: {exc}", res) from exc
        if set(est) != set(nodes):
            res.end_time = self.t
            raise SimulationCollapse("initialisation left nodes unplaced", res)
        self.est = {n: e.xyz for n, e in est.items()}
        res.init_end = self.t
        self._snapshot(frame, {n: Role.ACTIVE for n in nodes}, nodes)

        if sc.mode == "tof_only":
            assignment = RoleAssignment.from_active(nodes, sc.n, epoch=0)
        elif sc.initial_active is not None:
            assignment = RoleAssignment.from_active(sc.initial_active, sc.n, epoch=0)
        else:
            assignment, report = allocate_roles(self._positions(), self.cfg, epoch=0, keep_costs=self.keep_costs)
            res.cost_reports.append(report)
        return assignment

    def _positions(self):
        return {n: Position.from_array(p) for n, p in self.est.items()}

    def _estimate(self, assignment: RoleAssignment, tofs, tdoas):
        res = self.result
        frame = FrameConvention.from_nodes(assignment.active, self.dim)
        try:
            prev = to_frame(self.est, frame, self.dim)
        except EstimationFailed:
            prev = dict(self.est)
        try:
            act = multilateration(
                tofs, frame, dim=self.dim, heights=self.heights,
                initial={a: prev[a] for a in assignment.active},
            )
            missing = set(assignment.active) - set(act)
            if missing:
                raise EstimationFailed(f"active nodes {sorted(missing)} unplaced")
        except EstimationFailed as exc:
            log.info("t=%.3f active multilateration failed: %s", self.t, exc)
            res.estimator_failures += 1
            act = {a: PositionEstimate(a, Position.from_array(prev[a]), valid=False) for a in assignment.active}
        new = {a: act[a].xyz for a in assignment.active}
        for a in assignment.active:
            if act[a].valid:
                res.active_updates[a].append(self.t)
        anchors = {a: act[a].xyz for a in assignment.active if act[a].valid}
        centroid = np.mean([new[a] for a in assignment.active], axis=0)
        for l in sorted(assignment.listeners):
            p_init = prev.get(l)
            if p_init is None or not np.all(np.isfinite(p_init)):
                p_init = np.array([centroid[0], centroid[1], self.heights[l]])
            est = tdoa_ls_estimator(tdoas.get(l, []), anchors, p_init, node=l, dim=self.dim)
            if est.valid:
                res.listener_updates[l].append(self.t)
            else:
                res.estimator_failures += 1
            new[l] = est.xyz
        self.est = new
        return frame

    def run(self) -> RunResult:
        sc, res = self.sc, self.result
        assignment = self._initialise()
        cycle_slots = len(pair_sequence(assignment.active)) * (2 if self.timing.double_sided else 1)
        while self.t + cycle_slots * self.slot <= sc.duration + 1e-9:
            res.assignments.append(assignment)
            res.assignment_times.append(self.t)
            tofs, tdoas = self.run_cycle(assignment.active, assignment.listeners)
            frame = self._estimate(assignment, tofs, tdoas)
            res.cycles += 1
            roles = {n: assignment.role_of(n) for n in range(sc.n)}
            self._snapshot(frame, roles, assignment.active)

            epoch = assignment.epoch + 1
            if sc.mode == "dynamic":
                nxt, report = allocate_roles(self._positions(), self.cfg, assignment, epoch=epoch, keep_costs=self.keep_costs)
                res.cost_reports.append(report)
            else:
                nxt = RoleAssignment(assignment.active, assignment.listeners, epoch)
            if nxt.active != assignment.active:
                res.role_changes += 1
                # The new role map is announced by an active node before the next cycle.
                for _ in range(sc.protocol.role_change_slots):
                    res.events.append(self.t, assignment.active[0], MessageKind.ROLE_UPDATE, "sent")
                    self.slots += 1
            assignment = nxt
        res.end_time = self.t
        self._flush(sc.duration, inclusive=True)
        self._finish_records()
        return res


def run_scenario(scenario: Scenario, *, keep_costs: bool = False) -> RunResult:
    """Run one scenario to completion; deterministic for a given seed.

    Raises :class:`SimulationCollapse` (carrying partial results) when the
    initial all-to-all localisation cannot be formed.
    """
    runner = _Runner(scenario, keep_costs)
    try:
        return runner.run()
    except SimulationCollapse:
        runner._finish_records()
        raise
