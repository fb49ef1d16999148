"""Domain types, geometry primitives and the node clock model."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NodeId = int

HULL_EPS = 1e-9  # metres; pure geometry, no noise involved
MAX_DRIFT_PPM = 100.0


class Role(str, enum.Enum):
    ACTIVE = "active"
    LISTENER = "listener"


class Dimension(str, enum.Enum):
    PLANAR = "2d"
    SPATIAL = "3d"

    @property
    def min_active(self) -> int:
        return 3 if self is Dimension.PLANAR else 4


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite coordinate in {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Position":
        a = list(a)
        if len(a) == 2:
            a.append(0.0)
        return cls(float(a[0]), float(a[1]), float(a[2]))


def as_xyz(p) -> np.ndarray:
    """Coerce a Position or 2/3-vector into a float array of length 3."""
    if isinstance(p, Position):
        return p.as_array()
    a = np.asarray(p, dtype=float).reshape(-1)
    if a.size == 2:
        a = np.append(a, 0.0)
    if a.size != 3:
        raise ValueError(f"expected 2 or 3 coordinates, got {a.size}")
    return a


def distance(a, b) -> float:
    """Euclidean distance in metres."""
    return float(np.linalg.norm(as_xyz(a) - as_xyz(b)))


@dataclass(frozen=True)
class ClockModel:
    """Free-running node clock: ``local = t * (1 + drift_ppm * 1e-6) + offset``."""

    offset: float = 0.0
    drift_ppm: float = 0.0
    max_drift_ppm: float = MAX_DRIFT_PPM

    def __post_init__(self):
        if abs(self.drift_ppm) > self.max_drift_ppm:
            raise ValueError(f"|drift| {self.drift_ppm} ppm exceeds bound {self.max_drift_ppm}")

    @property
    def rate(self) -> float:
        return 1.0 + self.drift_ppm * 1e-6

    def local_time(self, t: float) -> float:
        return t * self.rate + self.offset

    def global_duration(self, local_duration: float) -> float:
        """Simulation time elapsed while this clock counts ``local_duration``."""
        return local_duration / self.rate


@dataclass(frozen=True)
class RoleAssignment:
    """Active set A[t] and listener set L[t] for one allocation epoch."""

    active: tuple[NodeId, ...]
    listeners: frozenset[NodeId]
    epoch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(sorted(self.active)))
        object.__setattr__(self, "listeners", frozenset(self.listeners))
        if len(set(self.active)) != len(self.active):
            raise ValueError("duplicate active node")
        if set(self.active) & self.listeners:
            raise ValueError("active and listener sets overlap")

    @classmethod
    def from_active(cls, active: Iterable[NodeId], n: int, epoch: int = 0) -> "RoleAssignment":
        active = tuple(sorted(active))
        return cls(active, frozenset(range(n)) - set(active), epoch)

    @property
    def k(self) -> int:
        return len(self.active)

    @property
    def nodes(self) -> frozenset[NodeId]:
        return frozenset(self.active) | self.listeners

    def role_of(self, node: NodeId) -> Role:
        if node in self.listeners:
            return Role.LISTENER
        if node in self.active:
            return Role.ACTIVE
        raise KeyError(node)

    def check(self, n: int, dim: Dimension = Dimension.PLANAR) -> None:
        """Raise ValueError unless this is a valid partition of ``range(n)``."""
        if self.nodes != frozenset(range(n)):
            raise ValueError(f"assignment does not cover [0, {n})")
        if self.k < dim.min_active:
            raise ValueError(f"k={self.k} below minimum {dim.min_active} for {dim.value}")


@dataclass(frozen=True)
class TofMeasurement:
    pair: tuple[NodeId, NodeId]
    distance: float
    timestamp: float
    clamped: bool = False

    def __post_init__(self):
        if self.pair[0] == self.pair[1]:
            raise ValueError("ToF pair members must differ")
        if self.distance < 0:
            raise ValueError("negative distance")


@dataclass(frozen=True)
class TdoaMeasurement:
    """Range difference ``d(listener, j) - d(listener, i)`` for the exchange ``pair=(i, j)``."""

    listener: NodeId
    pair: tuple[NodeId, NodeId]
    range_difference: float
    timestamp: float


@dataclass(frozen=True)
class HullResult:
    inside: bool
    degenerate: bool = False


def _hull_2d(points: np.ndarray) -> np.ndarray:
    # Andrew's monotone chain, counter-clockwise, no repeated endpoint.
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def hull_membership(anchors, p, dim: Dimension = Dimension.PLANAR, eps: float = HULL_EPS) -> HullResult:
    """Convex-hull membership test that also reports degenerate anchor sets."""
    pts = np.array([as_xyz(a) for a in anchors], dtype=float)
    q = as_xyz(p)
    if dim is Dimension.PLANAR:
        if len(pts) < 3:
            return HullResult(False, True)
        hull = _hull_2d(pts[:, :2])
        if len(hull) < 3:
            return HullResult(False, True)
        edges = np.roll(hull, -1, axis=0) - hull
        area2 = np.sum(hull[:, 0] * np.roll(hull[:, 1], -1) - np.roll(hull[:, 0], -1) * hull[:, 1])
        if abs(area2) <= eps * max(1.0, float(np.max(np.ptp(hull, axis=0)))):
            return HullResult(False, True)
        rel = q[:2] - hull
        cross = edges[:, 0] * rel[:, 1] - edges[:, 1] * rel[:, 0]
        # signed distance of q to each CCW edge line; inside means all >= -eps
        lengths = np.linalg.norm(edges, axis=1)
        return HullResult(bool(np.all(cross / lengths >= -eps)))

    from scipy.spatial import ConvexHull, QhullError

    if len(pts) < 4:
        return HullResult(False, True)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return HullResult(False, True)
    # equations: normal . x + offset <= 0 inside, normals are unit length
    return HullResult(bool(np.all(hull.equations[:, :3] @ q + hull.equations[:, 3] <= eps)))


def convex_envelope_contains(anchors, p, dim: Dimension = Dimension.PLANAR, eps: float = HULL_EPS) -> bool:
    """True iff ``p`` lies inside or on the convex hull of ``anchors``.

    In planar mode both the anchors and ``p`` are projected onto the xy-plane.
    A degenerate (collinear / coplanar) anchor set contains nothing; use
    :func:`hull_membership` to tell that case apart.
    """
    return hull_membership(anchors, p, dim, eps).inside
