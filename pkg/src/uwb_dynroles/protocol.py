"""Timestamp-level model of the poll / response / data / ack ranging exchange.

Every capture is taken on the capturing node's own free-running clock, so
offsets and drifts enter exactly where they would on hardware.  Ranging
noise is added to receive timestamps (``sigma / c`` seconds per capture);
transmit times are scheduled and therefore exact in the sender's clock.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import ClockModel, NodeId, TdoaMeasurement, TofMeasurement, as_xyz

SPEED_OF_LIGHT = 299_792_458.0
BROADCAST = -1


class MessageKind(str, enum.Enum):
    POLL = "poll"
    RESPONSE = "response"
    DATA = "data"
    ACK = "ack"
    ROLE_UPDATE = "role_update"


_PAYLOAD_KEYS = {
    MessageKind.POLL: frozenset(),
    MessageKind.RESPONSE: frozenset({"t_resp"}),
    MessageKind.DATA: frozenset({"poll_tx", "resp_rx", "tof_distance"}),
    MessageKind.ACK: frozenset({"next_initiator"}),
    MessageKind.ROLE_UPDATE: frozenset({"active"}),
}


@dataclass(frozen=True)
class RangingMessage:
    kind: MessageKind
    source: NodeId
    dest: NodeId
    tx_time: float
    payload: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.payload) != _PAYLOAD_KEYS[self.kind]:
            raise ValueError(f"{self.kind.value} payload must carry {sorted(_PAYLOAD_KEYS[self.kind])}")


@dataclass(frozen=True)
class MediumModel:
    propagation_speed: float = SPEED_OF_LIGHT
    ranging_noise_sigma: float = 0.0
    loss_probability: float = 0.0

    def __post_init__(self):
        if self.propagation_speed <= 0:
            raise ValueError("propagation_speed must be positive")
        if self.ranging_noise_sigma < 0:
            raise ValueError("ranging_noise_sigma must be >= 0")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must lie in [0, 1)")

    def delay(self, d: float) -> float:
        return d / self.propagation_speed


@dataclass(frozen=True)
class ProtocolTiming:
    """Reply delays are counted on the replying node's clock."""

    turnaround: float = 250e-6
    data_delay: float = 250e-6
    ack_timeout: float = 500e-6
    max_retries: int = 3
    double_sided: bool = False

    def __post_init__(self):
        if self.turnaround <= 0 or self.data_delay <= 0 or self.ack_timeout <= 0:
            raise ValueError("protocol delays must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def attempt_period(self) -> float:
        return self.turnaround + self.ack_timeout


@dataclass(frozen=True)
class NodeTruth:
    position: np.ndarray
    clock: ClockModel = ClockModel()


@dataclass(frozen=True)
class ExchangeRecord:
    """Everything one completed exchange leaves behind.

    ``t_init`` is measured on the initiator clock, ``t_resp`` on the responder
    clock and every ``t_list`` entry on that listener's clock.
    """

    initiator: NodeId
    responder: NodeId
    t_init: float
    t_resp: float
    t_list: Mapping[NodeId, float]
    data_heard: frozenset[NodeId]
    start_time: float
    poll_tx: float  # absolute initiator-clock readings, as carried in Data
    resp_rx: float
    attempts: int = 1
    data_transmissions: int = 1
    acked: bool = True

    def __post_init__(self):
        if self.initiator == self.responder:
            raise ValueError("initiator and responder must differ")


class ExchangeOutcome(str, enum.Enum):
    ACKED = "acked"
    ACK_TIMEOUT = "ack_timeout"
    FAILED = "failed"


class ExchangeFailed(RuntimeError):
    def __init__(self, initiator: NodeId, responder: NodeId, attempts: int):
        super().__init__(f"exchange {initiator}->{responder} failed after {attempts} attempts")
        self.initiator = initiator
        self.responder = responder
        self.attempts = attempts


class MissingMeasurement(LookupError):
    """The listener did not capture the frames needed for a TDoA sample."""


@dataclass(frozen=True)
class Event:
    sim_time: float
    node: NodeId
    kind: str
    outcome: str


class EventLog:
    """Append-only transmission log."""

    def __init__(self):
        self._events: list[Event] = []

    def append(self, sim_time: float, node: NodeId, kind, outcome: str) -> None:
        kind = kind.value if isinstance(kind, MessageKind) else str(kind)
        self._events.append(Event(float(sim_time), int(node), kind, outcome))

    def __iter__(self) -> Iterator[Event]:
        return iter(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def count(self, kind=None, outcome: str | None = None, node: NodeId | None = None) -> int:
        kind = kind.value if isinstance(kind, MessageKind) else kind
        return sum(
            1
            for e in self._events
            if (kind is None or e.kind == kind)
            and (outcome is None or e.outcome == outcome)
            and (node is None or e.node == node)
        )

    def transmitters(self) -> set[NodeId]:
        return {e.node for e in self._events}

    def to_ndjson(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self._events)


DropFn = Callable[[MessageKind, NodeId, NodeId], bool]


def _random_drop(medium: MediumModel, rng: np.random.Generator) -> DropFn:
    def drop(kind, src, dst):
        return bool(rng.random() < medium.loss_probability)

    return drop


def run_twr_exchange(
    initiator: NodeId,
    responder: NodeId,
    world: Mapping[NodeId, NodeTruth],
    medium: MediumModel,
    *,
    timing: ProtocolTiming = ProtocolTiming(),
    listeners: Iterable[NodeId] = (),
    start_time: float = 0.0,
    rng: np.random.Generator | None = None,
    next_initiator: NodeId | None = None,
    log: EventLog | None = None,
    drop: DropFn | None = None,
) -> ExchangeRecord:
    """Simulate one single-sided two-way ranging exchange overheard by ``listeners``.

    Poll or Response loss makes the initiator re-poll, at most
    ``timing.max_retries`` times, before :class:`ExchangeFailed` is raised.
    A missing Ack from ``next_initiator`` makes the initiator re-send Data
    under the same retry bound; the ranging result itself is kept either way.
    """
    if initiator == responder:
        raise ValueError("initiator and responder must differ")
    rng = rng if rng is not None else np.random.default_rng(0)
    drop = drop if drop is not None else _random_drop(medium, rng)
    listeners = [l for l in listeners if l not in (initiator, responder)]
    sigma_t = medium.ranging_noise_sigma / medium.propagation_speed
    pos = {nid: as_xyz(world[nid].position) for nid in (initiator, responder, *listeners)}
    if next_initiator is not None and next_initiator not in pos:
        pos[next_initiator] = as_xyz(world[next_initiator].position)
    clk = {nid: world[nid].clock for nid in pos}

    # Local readings are split into the node's reading at ``start_time`` plus
    # a small increment.  A single double at second-scale readings resolves
    # only ~1e-16 s (tens of nanometres); increments keep sub-attosecond
    # resolution, and durations on one clock are differences of increments.
    def flight(a, b):
        return medium.delay(float(np.linalg.norm(pos[a] - pos[b])))

    def capture(node, dt):
        # Noise is drawn for every capture so that paired runs at different
        # sigma share the same realisation.
        return clk[node].rate * dt + sigma_t * rng.standard_normal()

    def send(kind, src, dt):
        if log is not None:
            log.append(start_time + dt, src, kind, "sent")

    def received(kind, src, dst):
        return not drop(kind, src, dst)

    t_i, t_r = clk[initiator], clk[responder]
    success = None
    attempts = 0
    for attempt in range(timing.max_retries + 1):
        attempts = attempt + 1
        dt_poll = attempt * timing.attempt_period
        poll_tx = t_i.rate * dt_poll
        send(MessageKind.POLL, initiator, dt_poll)
        poll_rx_list = {
            l: capture(l, dt_poll + flight(initiator, l))
            for l in listeners
            if received(MessageKind.POLL, initiator, l)
        }
        if not received(MessageKind.POLL, initiator, responder):
            if log is not None:
                log.append(start_time + dt_poll + timing.attempt_period, initiator, MessageKind.POLL, "timeout")
            continue
        poll_rx_r = capture(responder, dt_poll + flight(initiator, responder))
        dt_resp_tx = (poll_rx_r + timing.turnaround) / t_r.rate
        send(MessageKind.RESPONSE, responder, dt_resp_tx)
        resp_rx_list = {
            l: capture(l, dt_resp_tx + flight(responder, l))
            for l in listeners
            if received(MessageKind.RESPONSE, responder, l)
        }
        if not received(MessageKind.RESPONSE, responder, initiator):
            if log is not None:
                log.append(start_time + dt_poll + timing.attempt_period, initiator, MessageKind.RESPONSE, "timeout")
            continue
        resp_rx = capture(initiator, dt_resp_tx + flight(responder, initiator))
        t_list = {l: resp_rx_list[l] - poll_rx_list[l] for l in listeners if l in poll_rx_list and l in resp_rx_list}
        success = (poll_tx, resp_rx, t_list)
        break

    if success is None:
        if log is not None:
            log.append(start_time + attempts * timing.attempt_period, initiator, "exchange", "failed")
        raise ExchangeFailed(initiator, responder, attempts)

    poll_tx, resp_rx, t_list = success
    t_init = resp_rx - poll_tx
    tof_distance = max(t_init - timing.turnaround, 0.0) / 2 * medium.propagation_speed
    base = t_i.local_time(start_time)

    # Data broadcast, re-sent until the next initiator acknowledges.
    data_heard: set[NodeId] = set()
    need_ack = next_initiator is not None and next_initiator != initiator
    acked = not need_ack
    dt_data = (resp_rx + timing.data_delay) / t_i.rate
    data = RangingMessage(
        MessageKind.DATA, initiator, BROADCAST, start_time + dt_data,
        {"poll_tx": base + poll_tx, "resp_rx": base + resp_rx, "tof_distance": tof_distance},
    )
    data_tx = 0
    for _ in range(timing.max_retries + 1):
        data_tx += 1
        send(data.kind, initiator, dt_data)
        for l in listeners:
            if received(MessageKind.DATA, initiator, l):
                data_heard.add(l)
        if not need_ack:
            break
        if received(MessageKind.DATA, initiator, next_initiator):
            dt_ack = dt_data + flight(initiator, next_initiator) + clk[next_initiator].global_duration(timing.turnaround)
            send(MessageKind.ACK, next_initiator, dt_ack)
            if received(MessageKind.ACK, next_initiator, initiator):
                acked = True
                break
        if log is not None:
            log.append(start_time + dt_data + timing.ack_timeout, initiator, MessageKind.ACK, "timeout")
        dt_data += timing.ack_timeout

    return ExchangeRecord(
        initiator=initiator,
        responder=responder,
        t_init=t_init,
        t_resp=timing.turnaround,
        t_list=t_list,
        data_heard=frozenset(data_heard),
        start_time=start_time,
        poll_tx=base + poll_tx,
        resp_rx=base + resp_rx,
        attempts=attempts,
        data_transmissions=data_tx,
        acked=acked,
    )


def compute_tof(rec: ExchangeRecord) -> float:
    """Single-sided time of flight, clamped at zero."""
    return max((rec.t_init - rec.t_resp) / 2.0, 0.0)


def compute_tdoa(rec: ExchangeRecord, listener: NodeId, tof: float) -> float:
    """Arrival-time difference (responder minus initiator) seen by ``listener``.

    Only durations on the listener's own clock enter, so no clock
    synchronisation is required.
    """
    try:
        t_list = rec.t_list[listener]
    except KeyError:
        raise MissingMeasurement(f"listener {listener} missed exchange {rec.initiator}->{rec.responder}") from None
    return t_list - rec.t_resp - tof


def tof_measurement(rec: ExchangeRecord, medium: MediumModel, timestamp: float) -> TofMeasurement:
    raw = (rec.t_init - rec.t_resp) / 2.0
    return TofMeasurement(
        pair=(rec.initiator, rec.responder),
        distance=compute_tof(rec) * medium.propagation_speed,
        timestamp=timestamp,
        clamped=raw < 0,
    )


def tdoa_measurement(
    rec: ExchangeRecord, listener: NodeId, tof: float, medium: MediumModel, timestamp: float
) -> TdoaMeasurement:
    """TDoA sample for ``listener``; requires the Data frame to have been heard."""
    if listener not in rec.data_heard:
        raise MissingMeasurement(f"listener {listener} missed the data frame")
    return TdoaMeasurement(
        listener=listener,
        pair=(rec.initiator, rec.responder),
        range_difference=compute_tdoa(rec, listener, tof) * medium.propagation_speed,
        timestamp=timestamp,
    )


def double_sided_tof(first: ExchangeRecord, second: ExchangeRecord) -> float:
    """Average of two mirrored single-sided exchanges."""
    if {first.initiator, first.responder} != {second.initiator, second.responder}:
        raise ValueError("double-sided ranging needs two exchanges over the same pair")
    return 0.5 * (compute_tof(first) + compute_tof(second))


def pair_sequence(active: Sequence[NodeId]) -> list[tuple[NodeId, NodeId]]:
    """The fixed ranging order every node knows: lexicographic pairs of the sorted active set."""
    return list(itertools.combinations(sorted(active), 2))


@dataclass(frozen=True)
class ScheduleState:
    pair_sequence: tuple[tuple[NodeId, NodeId], ...]
    cursor: int = 0
    ack_timeout: float = ProtocolTiming.ack_timeout
    max_retries: int = ProtocolTiming.max_retries
    cycles: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pair_sequence", tuple(tuple(p) for p in self.pair_sequence))
        if not self.pair_sequence:
            raise ValueError("empty pair sequence")
        if not 0 <= self.cursor < len(self.pair_sequence):
            raise ValueError("cursor out of range")
        unordered = [frozenset(p) for p in self.pair_sequence]
        if len(set(unordered)) != len(unordered):
            raise ValueError("pair sequence repeats a pair")

    @classmethod
    def for_active(cls, active: Sequence[NodeId], timing: ProtocolTiming = ProtocolTiming()) -> "ScheduleState":
        return cls(tuple(pair_sequence(active)), 0, timing.ack_timeout, timing.max_retries)

    @property
    def current(self) -> tuple[NodeId, NodeId]:
        return self.pair_sequence[self.cursor]

    @property
    def next_pair(self) -> tuple[NodeId, NodeId]:
        return self.pair_sequence[(self.cursor + 1) % len(self.pair_sequence)]

    @property
    def cycle_length(self) -> int:
        return len(self.pair_sequence)


def advance_schedule(state: ScheduleState, outcome: ExchangeOutcome) -> ScheduleState:
    """Move to the next pair whatever the outcome; retries are bounded inside the exchange.

    A wrap to cursor 0 increments ``cycles`` (the cycle-complete event).
    """
    outcome = ExchangeOutcome(outcome)
    nxt = state.cursor + 1
    if nxt == len(state.pair_sequence):
        return replace(state, cursor=0, cycles=state.cycles + 1)
    return replace(state, cursor=nxt)


def cycle_frequency(k: int, pair_rate: float) -> float:
    """Full-network update rate of ``k`` active nodes ranging all-to-all."""
    if k < 2:
        raise ValueError("need at least two active nodes")
    if pair_rate <= 0:
        raise ValueError("pair_rate must be positive")
    return pair_rate / math.comb(k, 2)
