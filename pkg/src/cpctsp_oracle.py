# src/cpctsp_oracle.py
"""
CO layer: exact Capacitated Prize-Collecting TSP.

Customers are numbered 1..n and vertex 0 is the depot. A customer subset is
encoded as a bitmask with bit (i - 1) standing for customer i. Every routing
cost in this module is the left-to-right sum of the edge costs along the
depot-rooted cycle, which is also the order the Held-Karp recursion adds
them in; cached and recomputed costs therefore agree bit for bit.
"""
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import CapabilityError, RejectedInputError

logger = logging.getLogger(__name__)

MAX_CUSTOMERS = 20
# absolute slack on capacity checks; shared with the MDP and det-IRP modules
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class Tour:
    """Depot -> sequence -> depot; the empty sequence means staying at the depot"""
    sequence: Tuple[int, ...] = ()

    def __post_init__(self):
        seq = tuple(int(i) for i in self.sequence)
        if len(set(seq)) != len(seq):
            raise RejectedInputError(f"tour visits a customer twice: {seq}")
        if any(i < 1 for i in seq):
            raise RejectedInputError(f"customer indices start at 1: {seq}")
        object.__setattr__(self, "sequence", seq)

    @classmethod
    def empty(cls) -> "Tour":
        return cls(())

    @property
    def mask(self) -> int:
        mask = 0
        for i in self.sequence:
            mask |= 1 << (i - 1)
        return mask

    @property
    def customers(self) -> frozenset:
        return frozenset(self.sequence)

    def __len__(self) -> int:
        return len(self.sequence)

    def validate(self, n: int):
        if any(i > n for i in self.sequence):
            raise RejectedInputError(f"tour {self.sequence} references a customer beyond n={n}")


def mask_members(mask: int) -> List[int]:
    """Customers (1-based, ascending) contained in a bitmask"""
    members = []
    i = 1
    while mask:
        if mask & 1:
            members.append(i)
        mask >>= 1
        i += 1
    return members


def routing_cost(tour: Tour, gamma: np.ndarray) -> float:
    """Sum of edge costs along depot -> tour -> depot; 0 for the empty tour"""
    if not tour.sequence:
        return 0.0
    total = 0.0
    previous = 0
    for customer in tour.sequence:
        total += float(gamma[previous, customer])
        previous = customer
    total += float(gamma[previous, 0])
    return total


def _held_karp_dp(nodes: Sequence[int], gamma: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Held-Karp over `nodes` (vertex ids). Returns the cycle cost per local
    subset mask, the path table dp[mask, j] and the parent table.
    """
    k = len(nodes)
    nodes = np.asarray(nodes, dtype=int)
    size = 1 << k
    dp = np.full((size, k), np.inf)
    parent = np.full((size, k), -1, dtype=np.int64)
    local = gamma[np.ix_(nodes, nodes)]
    for j in range(k):
        dp[1 << j, j] = gamma[0, nodes[j]]
    bits = 1 << np.arange(k)
    for mask in range(1, size):
        if mask & (mask - 1) == 0:
            continue
        members = np.flatnonzero(mask & bits)
        previous = mask ^ bits[members]
        # candidate[r, i] = dp[mask without member r, i] + cost(i -> member r)
        candidate = dp[previous] + local[:, members].T
        best = np.argmin(candidate, axis=1)
        dp[mask, members] = candidate[np.arange(len(members)), best]
        parent[mask, members] = best
    closing = dp + gamma[nodes, 0][None, :]
    cycle = closing.min(axis=1)
    cycle[0] = 0.0
    return cycle, dp, parent


def _reconstruct(mask: int, dp: np.ndarray, parent: np.ndarray, nodes: Sequence[int],
                 gamma: np.ndarray) -> Tuple[int, ...]:
    if mask == 0:
        return ()
    closing = dp[mask] + gamma[np.asarray(nodes), 0]
    current = int(np.argmin(closing))
    order = []
    while mask:
        order.append(nodes[current])
        previous = int(parent[mask, current])
        mask ^= 1 << current
        current = previous
    order.reverse()
    return tuple(int(v) for v in order)


def held_karp(subset: int, gamma: np.ndarray) -> Tuple[float, Tuple[int, ...]]:
    """
    Optimal depot-rooted cycle through exactly the customers of `subset`.

    Returns:
        (cost, visiting order); the empty subset gives (0.0, ()).
    """
    n = gamma.shape[0] - 1
    if n > MAX_CUSTOMERS:
        raise CapabilityError(f"Held-Karp is limited to {MAX_CUSTOMERS} customers, instance has {n}")
    if subset == 0:
        return 0.0, ()
    nodes = mask_members(subset)
    if nodes[-1] > n:
        raise RejectedInputError(f"subset {subset:b} references a customer beyond n={n}")
    cycle, dp, parent = _held_karp_dp(nodes, gamma)
    full = (1 << len(nodes)) - 1
    return float(cycle[full]), _reconstruct(full, dp, parent, nodes, gamma)


class TourCostCache:
    """
    Optimal tour cost and order for every customer subset of one instance.

    The full Held-Karp table is built once on first use; visiting orders are
    reconstructed lazily and memoised. Concurrent readers are safe and
    concurrent inserts are idempotent because every value is canonical.
    """

    def __init__(self, gamma: np.ndarray):
        self.gamma = np.asarray(gamma, dtype=float)
        self.n = self.gamma.shape[0] - 1
        if self.n > MAX_CUSTOMERS:
            raise CapabilityError(f"Held-Karp is limited to {MAX_CUSTOMERS} customers, instance has {self.n}")
        self._costs: Optional[np.ndarray] = None
        self._dp = None
        self._parent = None
        self._orders: Dict[int, Tuple[int, ...]] = {}
        self._lock = threading.Lock()

    def matches(self, gamma: np.ndarray) -> bool:
        return gamma is self.gamma or np.array_equal(gamma, self.gamma)

    def _build(self):
        with self._lock:
            if self._costs is None:
                nodes = list(range(1, self.n + 1))
                costs, dp, parent = _held_karp_dp(nodes, self.gamma)
                self._dp, self._parent = dp, parent
                self._costs = costs
                logger.debug("built Held-Karp table for %d customers (%d subsets)", self.n, costs.size)

    def costs(self) -> np.ndarray:
        """Optimal cycle cost for every subset mask (index = mask)"""
        if self._costs is None:
            self._build()
        return self._costs

    def cost(self, mask: int) -> float:
        return float(self.costs()[mask])

    def order(self, mask: int) -> Tuple[int, ...]:
        cached = self._orders.get(mask)
        if cached is None:
            self.costs()
            cached = _reconstruct(mask, self._dp, self._parent, list(range(1, self.n + 1)), self.gamma)
            self._orders[mask] = cached
        return cached

    def tour(self, mask: int) -> Tour:
        return Tour(self.order(mask))

    def dump_csv(self, path: Union[str, Path]) -> Path:
        """Debug table of (subset, members, cost)"""
        costs = self.costs()
        frame = pd.DataFrame({
            "subset": np.arange(costs.size),
            "members": [" ".join(str(i) for i in mask_members(m)) for m in range(costs.size)],
            "cost": costs,
        })
        path = Path(path)
        frame.to_csv(path, index=False)
        return path


_shared_caches: Dict[bytes, TourCostCache] = {}
_shared_lock = threading.Lock()


def shared_cache(gamma: np.ndarray) -> TourCostCache:
    """Process-wide cache per travel-cost matrix"""
    gamma = np.asarray(gamma, dtype=float)
    key = gamma.tobytes() + str(gamma.shape).encode()
    with _shared_lock:
        cache = _shared_caches.get(key)
        if cache is None:
            cache = TourCostCache(gamma)
            _shared_caches[key] = cache
    return cache


def subset_sums(values: np.ndarray) -> np.ndarray:
    """
    sums[mask] = sum of values over the mask's members, accumulated in
    ascending customer order starting from 0.0
    """
    values = np.asarray(values, dtype=float)
    sums = np.zeros(1 << values.size)
    for b, value in enumerate(values):
        lo = 1 << b
        sums[lo:2 * lo] = sums[:lo] + value
    return sums


_popcount_tables: Dict[int, np.ndarray] = {}


def _popcounts(n: int) -> np.ndarray:
    table = _popcount_tables.get(n)
    if table is None:
        table = subset_sums(np.ones(n)).astype(np.int64)
        _popcount_tables[n] = table
    return table


def collected_prize(theta: np.ndarray, tour: Tour) -> float:
    """theta^T g(u) summed in ascending customer order"""
    total = 0.0
    for i in sorted(tour.sequence):
        total += float(theta[i - 1])
    return total


def oracle_objective(theta: np.ndarray, tour: Tour, gamma: np.ndarray) -> float:
    """Prizes collected minus routing cost of the tour as given"""
    return collected_prize(theta, tour) - routing_cost(tour, gamma)


def solve_with_value(prizes: np.ndarray, quantities: np.ndarray, B: float, gamma: np.ndarray,
                     cache: TourCostCache) -> Tuple[Tour, float]:
    """
    Exact CPCTSP by enumeration of capacity-feasible subsets of the
    positive-prize customers, scored with cached Held-Karp costs.

    Ties: larger objective, then fewer customers, then smaller bitmask.
    """
    theta = np.asarray(prizes, dtype=float)
    q = np.asarray(quantities, dtype=float)
    n = theta.size
    if q.size != n or cache.n != n:
        raise RejectedInputError(f"prizes ({n}), quantities ({q.size}) and cache ({cache.n}) disagree on n")
    if not np.all(np.isfinite(theta)):
        raise RejectedInputError("prizes must be finite")
    if np.any(q < 0):
        raise RejectedInputError("replenishment quantities must be non-negative")

    positive = 0
    for i in np.flatnonzero(theta > 0):
        positive |= 1 << int(i)
    if positive == 0:
        return Tour.empty(), 0.0

    masks = np.arange(1 << n, dtype=np.int64)
    valid = (masks & ~positive) == 0
    valid &= subset_sums(q) <= B + FEASIBILITY_TOL
    objective = subset_sums(theta) - cache.costs()
    best = objective[valid].max()
    candidates = masks[valid & (objective == best)]
    counts = _popcounts(n)[candidates]
    chosen = int(candidates[np.lexsort((candidates, counts))[0]])
    return cache.tour(chosen), float(best)


def solve(prizes: np.ndarray, quantities: np.ndarray, B: float, gamma: np.ndarray,
          cache: Optional[TourCostCache] = None) -> Tour:
    if cache is None:
        cache = shared_cache(gamma)
    elif not cache.matches(gamma):
        raise RejectedInputError("tour cost cache was built for a different travel-cost matrix")
    return solve_with_value(prizes, quantities, B, gamma, cache)[0]


def prizes_for_target(target: Union[int, Iterable[int]], gamma: np.ndarray) -> np.ndarray:
    """
    +M for customers in the target, -M elsewhere, with M = n * max gamma;
    the CPCTSP optimum then visits exactly the (capacity-feasible) target.
    """
    n = gamma.shape[0] - 1
    members = set(mask_members(target)) if isinstance(target, (int, np.integer)) else set(int(i) for i in target)
    if any(i < 1 or i > n for i in members):
        raise RejectedInputError(f"target {sorted(members)} is not a subset of 1..{n}")
    big_m = n * float(np.max(gamma))
    return np.array([big_m if i in members else -big_m for i in range(1, n + 1)])
