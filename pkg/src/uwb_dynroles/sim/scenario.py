"""Scenario description, JSON (de)serialisation and ``key=value`` overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..allocation import AllocationConfig, ConfigurationError
from ..core import Dimension
from ..protocol import SPEED_OF_LIGHT, MediumModel, ProtocolTiming, cycle_frequency
from .trajectory import StaticTrajectory, Trajectory

SCHEMA_VERSION = 1
Mode = Literal["tof_only", "tdoa_fixed", "dynamic"]


class ScenarioError(ValueError):
    """Unreadable or invalid scenario; ``line``/``column`` point into the JSON text when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NodeSpec(_Strict):
    id: int = Field(ge=0)
    z: float = 0.0
    trajectory: Trajectory

    @property
    def mobile(self) -> bool:
        return not isinstance(self.trajectory, StaticTrajectory)


class AllocationSpec(_Strict):
    k: int = 4
    min_frequency: float = Field(default=10.0, gt=0)
    pair_rate: float = Field(default=60.0, gt=0)
    hysteresis_margin: float = Field(default=0.0, ge=0)
    enumeration_budget: int = Field(default=1_000_000, gt=0)

    def runtime(self) -> AllocationConfig:
        return AllocationConfig(**self.model_dump())


class MediumSpec(_Strict):
    propagation_speed: float = Field(default=SPEED_OF_LIGHT, gt=0)
    ranging_noise_sigma: float = Field(default=0.10, ge=0)
    loss_probability: float = Field(default=0.0, ge=0, lt=1)

    def runtime(self) -> MediumModel:
        return MediumModel(**self.model_dump())


class ProtocolSpec(_Strict):
    turnaround: float = Field(default=250e-6, gt=0)
    data_delay: float = Field(default=250e-6, gt=0)
    ack_timeout: float = Field(default=500e-6, gt=0)
    max_retries: int = Field(default=3, ge=0)
    double_sided: bool = False
    role_change_slots: int = Field(default=1, ge=0)

    def runtime(self) -> ProtocolTiming:
        return ProtocolTiming(**self.model_dump(exclude={"role_change_slots"}))


class ClockSpec(_Strict):
    offset_range: tuple[float, float] = (0.0, 1.0)
    drift_ppm_range: tuple[float, float] = (-0.1, 0.1)
    max_drift_ppm: float = Field(default=100.0, gt=0)

    @model_validator(mode="after")
    def _ranges(self):
        lo, hi = self.drift_ppm_range
        if lo > hi or self.offset_range[0] > self.offset_range[1]:
            raise ValueError("clock ranges must be (low, high)")
        if max(abs(lo), abs(hi)) > self.max_drift_ppm:
            raise ValueError("drift range exceeds max_drift_ppm")
        return self


class Scenario(_Strict):
    schema_version: Literal[1]
    name: str = "scenario"
    mode: Mode = "dynamic"
    dimension: Literal["2d", "3d"] = "2d"
    seed: int = Field(default=0, ge=0, lt=2**64)
    duration: float = Field(gt=0)
    timestep: float = Field(default=0.1, gt=0)
    nodes: list[NodeSpec] = Field(min_length=3)
    allocation: AllocationSpec = AllocationSpec()
    medium: MediumSpec = MediumSpec()
    protocol: ProtocolSpec = ProtocolSpec()
    clocks: ClockSpec = ClockSpec()
    smoothing: float | None = Field(default=None, gt=0, le=1)
    initial_active: list[int] | None = None
    focus: list[int] | None = None
    switch_window: float = Field(default=1.0, ge=0)
    tracking: Literal["path", "setpoint"] = "path"

    @model_validator(mode="after")
    def _consistent(self):
        n = len(self.nodes)
        if sorted(s.id for s in self.nodes) != list(range(n)):
            raise ValueError(f"node ids must be exactly 0..{n - 1}")
        k = self.allocation.k
        dim = Dimension(self.dimension)
        if k > n:
            raise ValueError(f"k={k} exceeds node count {n}")
        if self.mode == "tof_only" and k != n:
            raise ValueError("mode tof_only requires allocation.k == number of nodes")
        try:
            self.allocation.runtime().check(dim)
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from None
        if self.initial_active is not None:
            ia = self.initial_active
            if len(set(ia)) != k or not set(ia) <= set(range(n)):
                raise ValueError("initial_active must list k distinct node ids")
        if self.focus is not None and not set(self.focus) <= set(range(n)):
            raise ValueError("focus lists unknown node ids")
        return self

    # -- convenience -------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> Dimension:
        return Dimension(self.dimension)

    @property
    def node_by_id(self) -> dict[int, NodeSpec]:
        return {s.id: s for s in self.nodes}

    @property
    def focus_nodes(self) -> list[int]:
        if self.focus is not None:
            return sorted(self.focus)
        mobile = [s.id for s in self.nodes if s.mobile]
        return mobile or [s.id for s in self.nodes]

    @property
    def slot(self) -> float:
        """Simulated time taken by one ranging exchange."""
        return 1.0 / self.allocation.pair_rate

    @property
    def cycle_frequency(self) -> float:
        return cycle_frequency(self.allocation.k, self.allocation.pair_rate)

    def geometry(self) -> list[dict]:
        return [s.model_dump(mode="json") for s in sorted(self.nodes, key=lambda s: s.id)]

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "Scenario":
        d = self.to_dict()
        for key, value in changes.items():
            set_path(d, key, value)
        return Scenario.from_dict(d)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            first = exc.errors()[0]
            loc = ".".join(str(p) for p in first["loc"])
            raise ScenarioError(f"invalid scenario at {loc or '<root>'}: {first['msg']}") from None


def loads(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    return Scenario.from_dict(data)


def load(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return loads(text)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def get_path(d: dict, dotted: str):
    cur = d
    for part in dotted.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict) and part in cur:
            cur = cur[part]
        else:
            raise KeyError(dotted)
    return cur


def set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for part in parts[:-1]:
        if isinstance(cur, list):
            cur = cur[int(part)]
        else:
            cur = cur.setdefault(part, {})
    if isinstance(cur, list):
        cur[int(parts[-1])] = value
    else:
        cur[parts[-1]] = value


def apply_overrides(scenario: Scenario, overrides: list[str]) -> Scenario:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    d = scenario.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        set_path(d, key.strip(), _parse_value(raw.strip()))
    return Scenario.from_dict(d)
