"""Dynamic active/listener role allocation."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Dimension, NodeId, Role, RoleAssignment, as_xyz
from .protocol import cycle_frequency

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12
DEFAULT_BUDGET = 1_000_000


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationConfig:
    k: int = 4
    min_frequency: float = 10.0
    pair_rate: float = 60.0
    hysteresis_margin: float = 0.0
    enumeration_budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.hysteresis_margin < 0:
            raise ConfigurationError("hysteresis_margin must be >= 0")
        if self.pair_rate <= 0 or self.min_frequency <= 0:
            raise ConfigurationError("rates must be positive")

    def check(self, dim: Dimension = Dimension.PLANAR) -> None:
        if self.k < dim.min_active:
            raise ConfigurationError(f"k={self.k} below the {dim.value} minimum of {dim.min_active}")
        if cycle_frequency(self.k, self.pair_rate) < self.min_frequency:
            raise ConfigurationError(
                f"k={self.k} at {self.pair_rate} exchanges/s gives "
                f"{cycle_frequency(self.k, self.pair_rate):.3g} Hz < {self.min_frequency} Hz"
            )


@dataclass(frozen=True)
class CostReport:
    costs: tuple[tuple[tuple[NodeId, ...], float], ...]
    chosen: tuple[NodeId, ...]
    evaluated_count: int
    kept_previous: bool = False
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "chosen": list(self.chosen),
            "evaluated_count": self.evaluated_count,
            "kept_previous": self.kept_previous,
            "skipped": self.skipped,
            "costs": [{"subset": list(s), "cost": c} for s, c in self.costs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def choose_active_count(min_frequency: float, pair_rate: float, n: int, dim: Dimension = Dimension.PLANAR) -> int:
    """Largest k <= n whose all-to-all cycle still runs at ``min_frequency``."""
    if pair_rate < min_frequency:
        raise ConfigurationError("pair_rate below the requested localisation frequency")
    feasible = [k for k in range(2, n + 1) if pair_rate / math.comb(k, 2) >= min_frequency]
    k = max(feasible, default=0)
    if k < dim.min_active:
        raise ConfigurationError(
            f"no feasible active count: best k={k} is below the {dim.value} minimum of {dim.min_active}"
        )
    return k


def tdoa_cost(active: Sequence[NodeId], positions: Mapping[NodeId, object]) -> float:
    """Sum over active triangles and listeners of squared listener-to-centroid distance."""
    active = sorted(active)
    aset = set(active)
    listeners = [as_xyz(positions[n]) for n in sorted(positions) if n not in aset]
    if not listeners:
        return 0.0
    L = np.array(listeners)
    total = 0.0
    for tri in itertools.combinations(active, 3):
        c = sum(as_xyz(positions[t]) for t in tri) / 3.0
        total += float(np.sum((L - c) ** 2))
    return total


def _subset_costs(subsets: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Vectorised cost for index ``subsets`` (s x k) over coordinates ``P`` (n x 3)."""
    n = len(P)
    k = subsets.shape[1]
    tri = np.array(list(itertools.combinations(range(k), 3)), dtype=int).reshape(-1, 3)
    mask = np.ones((len(subsets), n), dtype=bool)
    mask[np.arange(len(subsets))[:, None], subsets] = False
    cent = P[subsets[:, tri]].mean(axis=2)  # s x T x 3
    # sum_l |c - p_l|^2 = m|c|^2 - 2 c.S1 + S2, but computed directly to keep exact zeros
    diff = cent[:, :, None, :] - P[None, None, :, :]  # s x T x n x 3
    sq = np.einsum("stnd,stnd->stn", diff, diff)
    return np.einsum("stn,sn->s", sq, mask.astype(float))


def allocate_roles(
    positions: Mapping[NodeId, object],
    cfg: AllocationConfig,
    previous: RoleAssignment | None = None,
    *,
    epoch: int | None = None,
    keep_costs: bool = True,
) -> tuple[RoleAssignment, CostReport]:
    """Exhaustive argmin of :func:`tdoa_cost` over all k-subsets of the nodes.

    Ties go to the lexicographically smallest subset.  With a positive
    ``hysteresis_margin`` the previous active set survives unless the best
    subset is cheaper by that fraction.  Enumerations above
    ``cfg.enumeration_budget`` are skipped and ``previous`` is returned.
    """
    nodes = sorted(positions)
    n = len(nodes)
    k = cfg.k
    if k > n:
        raise ConfigurationError(f"k={k} exceeds node count {n}")
    epoch = epoch if epoch is not None else (previous.epoch + 1 if previous else 0)
    total = math.comb(n, k)
    if total > cfg.enumeration_budget:
        log.warning("allocation skipped: C(%d,%d)=%d exceeds budget %d", n, k, total, cfg.enumeration_budget)
        if previous is None:
            raise ConfigurationError("enumeration budget exceeded with no previous assignment")
        kept = RoleAssignment(previous.active, previous.listeners, epoch)
        return kept, CostReport((), previous.active, 0, True, True)

    P = np.array([as_xyz(positions[i]) for i in nodes])
    costs = np.empty(total)
    combos = itertools.combinations(range(n), k)
    chunk = max(1, 2_000_000 // max(1, math.comb(k, 3) * n))
    start = 0
    while start < total:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=int).reshape(-1, k)
        costs[start:start + len(block)] = _subset_costs(block, P)
        start += len(block)

    best = float(costs.min())
    # combinations() yields lexicographic order, so the first index within
    # tolerance of the minimum is the lexicographically smallest tie.
    idx = int(np.flatnonzero(costs <= best + TIE_RTOL * max(abs(best), 1.0))[0])
    chosen_ix = next(itertools.islice(itertools.combinations(range(n), k), idx, None))
    chosen = tuple(nodes[i] for i in chosen_ix)

    kept = False
    if previous is not None and cfg.hysteresis_margin > 0 and set(previous.active) <= set(nodes):
        prev_cost = tdoa_cost(previous.active, positions)
        if chosen != previous.active and best > prev_cost * (1.0 - cfg.hysteresis_margin):
            chosen = previous.active
            kept = True

    report_costs: tuple = ()
    if keep_costs:
        report_costs = tuple(
            (tuple(nodes[i] for i in c), float(v))
            for c, v in zip(itertools.combinations(range(n), k), costs)
        )
    return (
        RoleAssignment(chosen, frozenset(nodes) - set(chosen), epoch),
        CostReport(report_costs, chosen, total, kept),
    )


def reallocation_trace(assignments: Sequence[RoleAssignment], focus: NodeId) -> list[tuple[int, Role]]:
    """Per-epoch role of ``focus``."""
    if not assignments:
        raise ValueError("empty assignment history")
    return [(a.epoch, a.role_of(focus)) for a in assignments]
