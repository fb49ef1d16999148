"""Node trajectories: static, line, rectangle and waypoint paths at constant speed."""

from __future__ import annotations

from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

Point = Annotated[list[float], Field(min_length=2, max_length=3)]


class _Base(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _pt(p, z: float) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    return np.array([a[0], a[1], a[2] if a.size == 3 else z])


class _Polyline:
    """Piecewise motion: dwell at each vertex, then move to the next one."""

    def __init__(self, vertices: np.ndarray, speed: float, dwell: float, cyclic: bool):
        self.v = vertices
        self.cyclic = cyclic
        knots = [0.0]
        kinds = []
        for a, b in zip(vertices[:-1], vertices[1:]):
            if dwell > 0:
                kinds.append(("dwell", a, a))
                knots.append(knots[-1] + dwell)
            kinds.append(("move", a, b))
            knots.append(knots[-1] + float(np.linalg.norm(b - a)) / speed)
        self.knots = np.array(knots)
        self.pieces = kinds
        self.period = knots[-1]

    def at(self, t: float) -> np.ndarray:
        if self.period <= 0:
            return self.v[0].copy()
        if self.cyclic:
            t = t % self.period
        elif t >= self.period:
            return self.v[-1].copy()
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        i = min(max(i, 0), len(self.pieces) - 1)
        _, a, b = self.pieces[i]
        span = self.knots[i + 1] - self.knots[i]
        f = 0.0 if span <= 0 else (t - self.knots[i]) / span
        return a + f * (b - a)


class StaticTrajectory(_Base):
    kind: Literal["static"] = "static"
    position: Point

    def vertices(self, z: float) -> np.ndarray:
        return _pt(self.position, z)[None, :]

    def motion(self, z: float = 0.0) -> _Polyline:
        return _Polyline(self.vertices(z), 1.0, 0.0, False)

    def position_at(self, t: float, z: float = 0.0) -> np.ndarray:
        return _pt(self.position, z)

    def reference_path(self, z: float = 0.0) -> tuple[np.ndarray, bool]:
        return self.vertices(z), False


class _Moving(_Base):
    speed: float = Field(gt=0)
    dwell: float = Field(default=0.0, ge=0)

    def _route(self, z: float) -> tuple[np.ndarray, bool]:
        raise NotImplementedError

    def motion(self, z: float = 0.0) -> _Polyline:
        v, cyclic = self._route(z)
        return _Polyline(v, self.speed, self.dwell, cyclic)

    def position_at(self, t: float, z: float = 0.0) -> np.ndarray:
        return self.motion(z).at(t)


class LineTrajectory(_Moving):
    """Straight run from ``start`` to ``end``; ``loop`` makes it shuttle back and forth."""

    kind: Literal["line"] = "line"
    start: Point
    end: Point
    loop: bool = False

    def _route(self, z):
        a, b = _pt(self.start, z), _pt(self.end, z)
        if self.loop:
            return np.array([a, b, a]), True
        return np.array([a, b]), False

    def reference_path(self, z: float = 0.0) -> tuple[np.ndarray, bool]:
        return np.array([_pt(self.start, z), _pt(self.end, z)]), False


class RectangleTrajectory(_Moving):
    """Closed loop through four corners, repeated for the whole run."""

    kind: Literal["rectangle"] = "rectangle"
    corners: list[Point] = Field(min_length=4, max_length=4)

    def _route(self, z):
        c = [_pt(p, z) for p in self.corners]
        return np.array(c + [c[0]]), True

    def reference_path(self, z: float = 0.0) -> tuple[np.ndarray, bool]:
        return np.array([_pt(p, z) for p in self.corners]), True


class WaypointsTrajectory(_Moving):
    kind: Literal["waypoints"] = "waypoints"
    points: list[Point] = Field(min_length=1)
    loop: bool = False

    def _route(self, z):
        v = [_pt(p, z) for p in self.points]
        if self.loop and len(v) > 1:
            return np.array(v + [v[0]]), True
        return np.array(v), False

    def reference_path(self, z: float = 0.0) -> tuple[np.ndarray, bool]:
        return np.array([_pt(p, z) for p in self.points]), self.loop and len(self.points) > 1


Trajectory = Annotated[
    Union[StaticTrajectory, LineTrajectory, RectangleTrajectory, WaypointsTrajectory],
    Field(discriminator="kind"),
]


def distance_to_path(p, path: np.ndarray, closed: bool) -> float:
    """Shortest distance from ``p`` to a polyline (a single vertex is a point)."""
    p = np.asarray(p, dtype=float)
    if len(path) == 1:
        return float(np.linalg.norm(p - path[0]))
    a = path
    b = np.roll(path, -1, axis=0)
    if not closed:
        a, b = a[:-1], b[:-1]
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.min(np.linalg.norm(proj - p, axis=1)))
