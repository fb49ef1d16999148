"""Position solvers: gauge-fixed multilateration and the TDoA least-squares listener fix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .core import HULL_EPS, Dimension, NodeId, Position, TdoaMeasurement, TofMeasurement, as_xyz

log = logging.getLogger(__name__)


class EstimationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameConvention:
    """Relative frame: ``origin`` at 0, ``axis`` on +x, ``plane`` at y > 0.

    ``fourth`` (3-D only) fixes the remaining mirror ambiguity by sitting at z > 0.
    """

    origin: NodeId
    axis: NodeId
    plane: NodeId | None = None
    fourth: NodeId | None = None

    def __post_init__(self):
        ids = [i for i in (self.origin, self.axis, self.plane, self.fourth) if i is not None]
        if len(set(ids)) != len(ids):
            raise ValueError("frame nodes must be distinct")

    @classmethod
    def from_nodes(cls, nodes: Iterable[NodeId], dim: Dimension = Dimension.PLANAR) -> "FrameConvention":
        """Frame defined by the lowest node ids, in order."""
        s = sorted(nodes)
        if len(s) < 2:
            raise ValueError("a frame needs at least two nodes")
        fourth = s[3] if dim is Dimension.SPATIAL and len(s) > 3 else None
        return cls(s[0], s[1], s[2] if len(s) > 2 else None, fourth)

    @property
    def members(self) -> tuple[NodeId, ...]:
        return tuple(i for i in (self.origin, self.axis, self.plane, self.fourth) if i is not None)


@dataclass(frozen=True)
class PositionEstimate:
    node: NodeId
    position: Position
    residual: float = 0.0
    valid: bool = True
    degenerate: bool = False

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be >= 0")

    @property
    def xyz(self) -> np.ndarray:
        return self.position.as_array()


# ---------------------------------------------------------------------------
# Levenberg-damped Gauss-Newton
# ---------------------------------------------------------------------------


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    converged: bool
    iterations: int
    cost_history: list[float] = field(default_factory=list)
    ill_conditioned: bool = False


def levenberg_marquardt(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0,
    *,
    max_iter: int = 100,
    gtol: float = 1e-10,
    xtol: float = 1e-13,
    lam0: float = 1e-3,
) -> LMResult:
    """Minimise ``sum(r(x)**2)`` where ``fun(x) -> (r, J)``.

    Steps are only accepted when they lower the cost, so the recorded
    ``cost_history`` is non-increasing.  Damping is scaled by the diagonal of
    ``J^T J`` (floored), which also regularises rank-deficient Jacobians.
    """
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    ill = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < gtol or cost < 1e-30:
            converged = True
            break
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12 * max(1.0, float(np.max(np.diag(A), initial=0.0))))
        if np.linalg.cond(A) > 1e12:
            ill = True
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            r_new, J_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                x, r, J, cost = x_new, r_new, J_new, cost_new
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            # No descent direction left at machine precision: a stationary point.
            g = J.T @ r
            converged = bool(np.max(np.abs(g), initial=0.0) <= 1e-6 * max(1.0, float(np.sqrt(cost))))
            break
        if np.linalg.norm(step) <= xtol * (1.0 + np.linalg.norm(x)):
            converged = True
            break
    else:
        g = J.T @ r
        converged = bool(np.max(np.abs(g), initial=0.0) < gtol)
    return LMResult(x, cost, converged, it, history, ill)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def frame_transform(positions: Mapping[NodeId, object], frame: FrameConvention, dim: Dimension = Dimension.PLANAR):
    """Rigid map ``q = R @ (p - o)`` taking ``positions`` into ``frame``.

    In planar mode only x/y move; z keeps its absolute value.  ``R`` may
    include a reflection (the frame fixes handedness by the plane node).
    """
    o = as_xyz(positions[frame.origin]).copy()
    a = as_xyz(positions[frame.axis]) - o
    if dim is Dimension.PLANAR:
        o[2] = 0.0
        a[2] = 0.0
    na = np.linalg.norm(a)
    if na < HULL_EPS:
        raise EstimationFailed("origin and axis nodes coincide")
    e1 = a / na
    if dim is Dimension.PLANAR:
        e2 = np.array([-e1[1], e1[0], 0.0])
        if frame.plane is not None and (as_xyz(positions[frame.plane]) - o) @ e2 < 0:
            e2 = -e2
        e3 = np.array([0.0, 0.0, 1.0])
    else:
        if frame.plane is None:
            raise EstimationFailed("3-D frame needs a plane node")
        b = as_xyz(positions[frame.plane]) - o
        b = b - (b @ e1) * e1
        nb = np.linalg.norm(b)
        if nb < HULL_EPS:
            raise EstimationFailed("frame nodes are collinear")
        e2 = b / nb
        e3 = np.cross(e1, e2)
        if frame.fourth is not None and (as_xyz(positions[frame.fourth]) - o) @ e3 < 0:
            e3 = -e3
    return np.vstack([e1, e2, e3]), o


def to_frame(positions: Mapping[NodeId, object], frame: FrameConvention, dim: Dimension = Dimension.PLANAR):
    R, o = frame_transform(positions, frame, dim)
    return {k: R @ (as_xyz(p) - o) for k, p in positions.items()}


def sign_disambiguate(
    estimates: Mapping[NodeId, PositionEstimate], frame: FrameConvention, dim: Dimension = Dimension.PLANAR
) -> dict[NodeId, PositionEstimate]:
    """Reflect so the plane node has y > 0 (and, in 3-D, the fourth node z > 0)."""
    out = dict(estimates)
    if frame.plane is None or frame.plane not in out:
        return out
    flip = np.ones(3)
    ambiguous = False
    y = out[frame.plane].xyz[1]
    if abs(y) < HULL_EPS:
        ambiguous = True
    elif y < 0:
        flip[1] = -1.0
    if dim is Dimension.SPATIAL and frame.fourth is not None and frame.fourth in out:
        z = out[frame.fourth].xyz[2]
        if abs(z) < HULL_EPS:
            ambiguous = True
        elif z < 0:
            flip[2] = -1.0
    if np.all(flip == 1.0) and not ambiguous:
        return out
    return {
        k: replace(e, position=Position.from_array(e.xyz * flip), degenerate=e.degenerate or ambiguous)
        for k, e in out.items()
    }


# ---------------------------------------------------------------------------
# Multilateration
# ---------------------------------------------------------------------------


def _classical_mds(D: np.ndarray, ndim: int) -> np.ndarray:
    m = len(D)
    J = np.eye(m) - np.ones((m, m)) / m
    B = -0.5 * J @ (D**2) @ J
    w, V = np.linalg.eigh(B)
    idx = np.argsort(w)[::-1][:ndim]
    return V[:, idx] * np.sqrt(np.maximum(w[idx], 0.0))


def multilateration(
    ranges: Iterable[TofMeasurement],
    frame: FrameConvention,
    *,
    dim: Dimension = Dimension.PLANAR,
    heights: Mapping[NodeId, float] | None = None,
    initial: Mapping[NodeId, object] | None = None,
    max_iter: int = 100,
) -> dict[NodeId, PositionEstimate]:
    """Embed nodes from pairwise ranges in the relative frame ``frame``.

    Planar mode solves x/y with every node's z held at ``heights`` (default 0)
    and compares full 3-D distances.  The starting point is ``initial`` (if it
    covers every node) or classical MDS; the embedding is then refined by
    least squares over all pairwise residuals with the frame gauge imposed.
    """
    ranges = list(ranges)
    nodes = sorted({i for m in ranges for i in m.pair} | set(frame.members))
    if not all(i in {j for m in ranges for j in m.pair} for i in frame.members):
        raise EstimationFailed("frame node without any range")
    index = {n: k for k, n in enumerate(nodes)}
    m = len(nodes)
    sums = np.zeros((m, m))
    counts = np.zeros((m, m))
    for meas in ranges:
        a, b = index[meas.pair[0]], index[meas.pair[1]]
        sums[a, b] += meas.distance
        sums[b, a] += meas.distance
        counts[a, b] += 1
        counts[b, a] += 1
    have = counts > 0
    D = np.where(have, sums / np.maximum(counts, 1), np.nan)
    z = np.array([0.0 if heights is None else float(heights.get(n, 0.0)) for n in nodes])
    planar = dim is Dimension.PLANAR

    if m == 2:
        if frame.plane is not None:
            raise EstimationFailed("plane node missing")
        d = D[0, 1]
        if planar:
            dh = np.sqrt(max(d**2 - (z[1] - z[0]) ** 2, 0.0))
            p = {frame.origin: (0.0, 0.0, z[index[frame.origin]]), frame.axis: (dh, 0.0, z[index[frame.axis]])}
        else:
            p = {frame.origin: (0.0, 0.0, 0.0), frame.axis: (d, 0.0, 0.0)}
        return {k: PositionEstimate(k, Position.from_array(v)) for k, v in p.items()}

    need = 2 if planar else 3
    degree = have.sum(axis=1)
    if np.any(degree < min(need, m - 1)) or not have[index[frame.origin], index[frame.axis]]:
        raise EstimationFailed(f"insufficient ranges for nodes {[nodes[i] for i in np.flatnonzero(degree < need)]}")
    if frame.plane is None:
        raise EstimationFailed("three or more nodes need a plane node")

    ndim = 2 if planar else 3
    if initial is not None and all(n in initial for n in nodes):
        P0 = np.array([as_xyz(initial[n]) for n in nodes])
    else:
        H = D.copy()
        if planar:
            H = np.sqrt(np.maximum(H**2 - (z[:, None] - z[None, :]) ** 2, 0.0))
        if not np.all(have | np.eye(m, dtype=bool)):
            H = shortest_path(np.where(have, H, 0.0), directed=False)
            if not np.all(np.isfinite(H)):
                raise EstimationFailed("range graph is disconnected")
        np.fill_diagonal(H, 0.0)
        X = _classical_mds(H, ndim)
        P0 = np.zeros((m, 3))
        P0[:, :ndim] = X
    if planar:
        P0[:, 2] = z
    try:
        R, o = frame_transform({n: P0[index[n]] for n in nodes}, frame, dim)
    except EstimationFailed:
        # MDS collapsed the frame; nudge the plane node off the axis.
        P0[index[frame.plane], 1] += 1.0
        R, o = frame_transform({n: P0[index[n]] for n in nodes}, frame, dim)
    P0 = (P0 - o) @ R.T
    # Gauge coordinates are exact zeros, not rounding residue of the rotation.
    P0[index[frame.origin], :2] = 0.0
    P0[index[frame.axis], 1] = 0.0
    if not planar:
        P0[index[frame.origin], 2] = 0.0
        P0[index[frame.axis], 2] = 0.0
        P0[index[frame.plane], 2] = 0.0

    # Free coordinates under the gauge.
    free: list[tuple[int, int]] = []
    for n in nodes:
        i = index[n]
        if n == frame.origin:
            continue
        if n == frame.axis:
            coords = [0]
        elif n == frame.plane:
            coords = [0, 1]
        else:
            coords = [0, 1] if planar else [0, 1, 2]
        free.extend((i, c) for c in coords)
    M = np.zeros((3 * m, len(free)))
    for col, (i, c) in enumerate(free):
        M[3 * i + c, col] = 1.0
    base = P0.copy()
    for i, c in free:
        base[i, c] = 0.0
    ia, ib = np.nonzero(np.triu(have, 1))
    dij = D[ia, ib]

    def fun(x):
        P = base + (M @ x).reshape(m, 3)
        diff = P[ia] - P[ib]
        norm = np.linalg.norm(diff, axis=1)
        u = diff / np.maximum(norm, 1e-12)[:, None]
        r = norm - dij
        G = np.zeros((len(ia), 3 * m))
        rows = np.arange(len(ia))
        for c in range(3):
            G[rows, 3 * ia + c] = u[:, c]
            G[rows, 3 * ib + c] = -u[:, c]
        return r, G @ M

    x0 = np.array([P0[i, c] for i, c in free])
    res = levenberg_marquardt(fun, x0, max_iter=max_iter)
    P = base + (M @ res.x).reshape(m, 3)
    r, _ = fun(res.x)
    sq = np.zeros(m)
    cnt = np.zeros(m)
    np.add.at(sq, ia, r**2)
    np.add.at(sq, ib, r**2)
    np.add.at(cnt, ia, 1)
    np.add.at(cnt, ib, 1)
    rms = np.sqrt(sq / np.maximum(cnt, 1))
    if not res.converged:
        log.debug("multilateration did not converge (cost %.3g)", res.cost)
    est = {
        n: PositionEstimate(n, Position.from_array(P[index[n]]), float(rms[index[n]]), res.converged)
        for n in nodes
    }
    return sign_disambiguate(est, frame, dim)


# ---------------------------------------------------------------------------
# TDoA listener estimator
# ---------------------------------------------------------------------------


def tdoa_residuals(p, meas: Iterable[TdoaMeasurement], anchors: Mapping[NodeId, object]):
    """Residual vector and its Jacobian w.r.t. the full 3-D listener position.

    ``r_m = d_m - (|p - p_j| - |p - p_i|)`` for measurement pair ``(i, j)``.
    """
    return _tdoa_rj(as_xyz(p), *_tdoa_arrays(list(meas), anchors))


def _tdoa_arrays(meas: list[TdoaMeasurement], anchors: Mapping[NodeId, object]):
    pi = np.array([as_xyz(anchors[m.pair[0]]) for m in meas])
    pj = np.array([as_xyz(anchors[m.pair[1]]) for m in meas])
    d = np.array([m.range_difference for m in meas])
    return pi, pj, d


def _tdoa_rj(p: np.ndarray, pi: np.ndarray, pj: np.ndarray, d: np.ndarray):
    vi, vj = p - pi, p - pj
    ni = np.maximum(np.linalg.norm(vi, axis=1), 1e-12)
    nj = np.maximum(np.linalg.norm(vj, axis=1), 1e-12)
    r = d - (nj - ni)
    J = -(vj / nj[:, None] - vi / ni[:, None])
    return r, J


def _anchor_rank(points: np.ndarray, planar: bool) -> int:
    if len(points) == 0:
        return 0
    rel = points - points[0]
    if planar:
        rel = rel[:, :2]
    s = np.linalg.svd(rel, compute_uv=False)
    return int(np.sum(s > HULL_EPS * max(1.0, s[0] if len(s) else 1.0)))


def tdoa_ls_estimator(
    meas: Iterable[TdoaMeasurement],
    anchors: Mapping[NodeId, object],
    p_init,
    *,
    node: NodeId | None = None,
    dim: Dimension = Dimension.PLANAR,
    max_iter: int = 100,
    gtol: float = 1e-10,
) -> PositionEstimate:
    """Least-squares listener position from range differences to anchor pairs.

    Minimises ``sum_m (d_m - (|p - p_j| - |p - p_i|))**2`` from ``p_init``.
    In planar mode z is held at ``p_init``'s z.  When the solve cannot run or
    does not converge the returned estimate carries ``p_init`` with
    ``valid=False``.
    """
    p0 = as_xyz(p_init)
    usable = [m for m in meas if m.pair[0] in anchors and m.pair[1] in anchors]
    node = node if node is not None else (usable[0].listener if usable else -1)
    planar = dim is Dimension.PLANAR

    def failed(reason):
        log.debug("listener %s: %s", node, reason)
        return PositionEstimate(node, Position.from_array(p0), 0.0, False, True)

    if len(usable) < (2 if planar else 3):
        return failed("too few range differences")
    used = sorted({i for m in usable for i in m.pair})
    if _anchor_rank(np.array([as_xyz(anchors[i]) for i in used]), planar) < (2 if planar else 3):
        return failed("degenerate anchor geometry")

    free = [0, 1] if planar else [0, 1, 2]

    arrays = _tdoa_arrays(usable, anchors)

    def fun(x):
        p = p0.copy()
        p[free] = x
        r, J = _tdoa_rj(p, *arrays)
        return r, J[:, free]

    res = levenberg_marquardt(fun, p0[free], max_iter=max_iter, gtol=gtol)
    if not res.converged or not np.all(np.isfinite(res.x)):
        return PositionEstimate(node, Position.from_array(p0), float(np.sqrt(res.cost / len(usable))), False, res.ill_conditioned)
    p = p0.copy()
    p[free] = res.x
    return PositionEstimate(node, Position.from_array(p), float(np.sqrt(res.cost / len(usable))), True, res.ill_conditioned)
