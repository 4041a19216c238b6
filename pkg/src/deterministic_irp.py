# src/deterministic_irp.py
"""
Deterministic multi-period IRP with known demands.

Two solvers share one cost model (order-up-to replenishment, holding and
stock-out costs, Held-Karp routing per period, no terminal value):

* an exhaustive dynamic program over "last visit" states, exact for tiny
  instances (n <= 6, H <= 4);
* a multi-restart first-improvement local search for everything else.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SolverConfig
from cpctsp_oracle import FEASIBILITY_TOL, Tour, TourCostCache, routing_cost, shared_cache, subset_sums
from errors import CapabilityError, ContractViolationError, RejectedInputError
from instance_generator import Instance
from inventory_mdp import State, period_cost, post_demand_levels

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_N = 6
EXHAUSTIVE_MAX_H = 4


@dataclass(frozen=True, eq=False)
class VisitSchedule:
    """H x n visit flags plus the Held-Karp tour of every period"""
    visits: np.ndarray
    tours: Tuple[Tour, ...]

    def __post_init__(self):
        visits = np.array(self.visits, dtype=bool)
        if visits.ndim != 2 or visits.shape[0] != len(self.tours):
            raise RejectedInputError("visits must be H x n with one tour per period")
        for h, tour in enumerate(self.tours):
            if tour.customers != frozenset(int(i) + 1 for i in np.flatnonzero(visits[h])):
                raise RejectedInputError(f"period {h}: tour {tour.sequence} disagrees with the visit flags")
        visits.setflags(write=False)
        object.__setattr__(self, "visits", visits)
        object.__setattr__(self, "tours", tuple(self.tours))

    @classmethod
    def from_visits(cls, visits: np.ndarray, cache: TourCostCache) -> "VisitSchedule":
        visits = np.asarray(visits, dtype=bool)
        bits = 1 << np.arange(visits.shape[1], dtype=np.int64)
        masks = visits.astype(np.int64) @ bits
        return cls(visits, tuple(cache.tour(int(m)) for m in masks))

    @property
    def H(self) -> int:
        return self.visits.shape[0]

    @property
    def n(self) -> int:
        return self.visits.shape[1]

    @property
    def first_tour(self) -> Tour:
        return self.tours[0]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, VisitSchedule) and np.array_equal(self.visits, other.visits) \
            and self.tours == other.tours


def _check_inputs(instance: Instance, inventories: np.ndarray, demands: np.ndarray) -> np.ndarray:
    demands = np.asarray(demands, dtype=float)
    if demands.ndim != 2 or demands.shape[0] != instance.n or demands.shape[1] < 1:
        raise RejectedInputError(f"demands must be n x H with n={instance.n} and H >= 1, got {demands.shape}")
    if np.asarray(inventories).shape != (instance.n,):
        raise RejectedInputError("inventories must have one entry per customer")
    return demands


def schedule_cost(instance: Instance, state: State, demands: np.ndarray, schedule: VisitSchedule) -> float:
    """
    Simulate the schedule period by period and sum holding, stock-out and
    routing costs (no terminal value).

    Raises:
        ContractViolationError: a period's deliveries exceed the vehicle capacity
    """
    demands = _check_inputs(instance, state.inventories, demands)
    if schedule.H != demands.shape[1] or schedule.n != instance.n:
        raise RejectedInputError("schedule shape does not match the demand matrix")
    inventories = np.array(state.inventories, dtype=float)
    totals = []
    for h in range(schedule.H):
        z = schedule.visits[h].astype(float)
        load = float(np.dot(instance.C - inventories, z))
        if load > instance.B + FEASIBILITY_TOL:
            raise ContractViolationError(
                f"period {h}: delivery of {load:.4f} exceeds vehicle capacity {instance.B:.4f}",
                period=h, load=load, capacity=instance.B)
        levels = post_demand_levels(instance.C, inventories, z, demands[:, h])
        totals.append(period_cost(instance.kappa, instance.rho, levels,
                                  routing_cost(schedule.tours[h], instance.gamma)).total)
        inventories = np.maximum(levels, 0.0)
    return math.fsum(totals)


class ScheduleEvaluator:
    """
    Fast re-evaluation of visit matrices for one (instance, inventories,
    demands) triple. Costs agree exactly with `schedule_cost`.
    """

    def __init__(self, instance: Instance, inventories: np.ndarray, demands: np.ndarray, cache: TourCostCache):
        self.instance = instance
        self.inventories = np.asarray(inventories, dtype=float)
        self.demands = demands
        self.H = demands.shape[1]
        self.n = instance.n
        self.route = cache.costs()
        self.bits = 1 << np.arange(self.n, dtype=np.int64)
        self.evaluations = 0

    def simulate(self, visits: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """Total cost, per-period loads and per-period delivery quantities"""
        self.evaluations += 1
        inst = self.instance
        inventories = self.inventories
        masks = visits.astype(np.int64) @ self.bits
        loads = np.empty(self.H)
        quantities = np.empty((self.H, self.n))
        totals = []
        for h in range(self.H):
            z = visits[h].astype(float)
            quantities[h] = inst.C - inventories
            loads[h] = float(np.dot(quantities[h], z))
            levels = post_demand_levels(inst.C, inventories, z, self.demands[:, h])
            totals.append(period_cost(inst.kappa, inst.rho, levels, float(self.route[masks[h]])).total)
            inventories = np.maximum(levels, 0.0)
        return math.fsum(totals), loads, quantities

    def feasible(self, loads: np.ndarray) -> bool:
        return bool(np.all(loads <= self.instance.B + FEASIBILITY_TOL))


# ---------------------------------------------------------------------------
# exhaustive dynamic program

class _ExhaustiveSolver:
    """
    Backward DP whose state is the period of each customer's last visit
    (code 0 = not visited yet, code l + 1 = last visited in period l).
    Inventories, delivery quantities and per-customer costs are pure
    functions of that code, so they are tabulated once.
    """

    def __init__(self, instance: Instance, inventories: np.ndarray, demands: np.ndarray, cache: TourCostCache):
        self.instance = instance
        self.n, self.H = demands.shape
        self.route = cache.costs()
        self.base = self.H + 1
        self.weights = self.base ** np.arange(self.n, dtype=np.int64)
        C, kappa, rho = instance.C, instance.kappa, instance.rho

        start = np.zeros((self.n, self.H + 1, self.H))
        level = np.asarray(inventories, dtype=float)
        for t in range(self.H):
            start[:, 0, t] = level
            level = np.maximum(level - demands[:, t], 0.0)
        for last in range(self.H):
            level = np.maximum(C - demands[:, last], 0.0)
            for t in range(last + 1, self.H):
                start[:, last + 1, t] = level
                level = np.maximum(level - demands[:, t], 0.0)

        visited = C[:, None] - demands
        self.visit_cost = kappa[:, None] * np.maximum(visited, 0.0) + rho * kappa[:, None] * np.maximum(-visited, 0.0)
        idle = start - demands[:, None, :]
        self.idle_cost = (kappa[:, None, None] * np.maximum(idle, 0.0)
                          + rho * kappa[:, None, None] * np.maximum(-idle, 0.0))
        self.quantity = C[:, None, None] - start

        n = self.n
        # row key: customer 1 is the most significant flag of a period row
        self.row_key = np.zeros(1 << n, dtype=np.int64)
        for b in range(n):
            self.row_key[(np.arange(1 << n) >> b) & 1 == 1] += 1 << (n - 1 - b)
        self._memo: Dict[Tuple[int, int], Tuple[float, int]] = {}

    def _codes(self, encoded: int) -> np.ndarray:
        return (encoded // self.weights) % self.base

    def node_values(self, t: int, encoded: int) -> np.ndarray:
        """Cost of every period-t subset plus the optimal continuation (inf if infeasible)"""
        codes = self._codes(encoded)
        idx = np.arange(self.n)
        idle = self.idle_cost[idx, codes, t]
        delta = self.visit_cost[:, t] - idle
        loads = subset_sums(self.quantity[idx, codes, t])
        values = math.fsum(idle) + subset_sums(delta) + self.route
        feasible = loads <= self.instance.B + FEASIBILITY_TOL
        values[~feasible] = np.inf
        if t + 1 < self.H:
            step = subset_sums((t + 1 - codes) * self.weights).astype(np.int64)
            for mask in np.flatnonzero(feasible):
                values[mask] += self.value(t + 1, encoded + int(step[mask]))[0]
        return values

    def choose(self, values: np.ndarray) -> int:
        best = values.min()
        ties = np.flatnonzero(values == best)
        return int(ties[np.argmin(self.row_key[ties])])

    def value(self, t: int, encoded: int) -> Tuple[float, int]:
        key = (t, encoded)
        cached = self._memo.get(key)
        if cached is None:
            values = self.node_values(t, encoded)
            mask = self.choose(values)
            cached = (float(values[mask]), mask)
            self._memo[key] = cached
        return cached

    def schedule_masks(self) -> List[int]:
        masks = []
        encoded = 0
        for t in range(self.H):
            _, mask = self.value(t, encoded)
            masks.append(mask)
            codes = self._codes(encoded)
            for i in range(self.n):
                if mask >> i & 1:
                    codes[i] = t + 1
            encoded = int(np.dot(codes, self.weights))
        return masks


def _guard_exhaustive(n: int, H: int, solver: Optional[SolverConfig] = None):
    max_n = min(EXHAUSTIVE_MAX_N, solver.exhaustive_max_n) if solver else EXHAUSTIVE_MAX_N
    max_h = min(EXHAUSTIVE_MAX_H, solver.exhaustive_max_h) if solver else EXHAUSTIVE_MAX_H
    if n > max_n or H > max_h:
        raise CapabilityError(f"exhaustive det-IRP is limited to n <= {max_n} and H <= {max_h}, got n={n}, H={H}")


def within_exhaustive_guard(n: int, H: int, solver: Optional[SolverConfig] = None) -> bool:
    try:
        _guard_exhaustive(n, H, solver)
    except CapabilityError:
        return False
    return True


def _masks_to_visits(masks: Sequence[int], n: int) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def solve_exhaustive(instance: Instance, state: State, demands: np.ndarray,
                     cache: Optional[TourCostCache] = None) -> VisitSchedule:
    """
    Globally optimal schedule; ties resolve to the lexicographically
    smallest flattened visit matrix (period-major, customer 1 first).

    Raises:
        CapabilityError: n > 6 or H > 4
    """
    demands = _check_inputs(instance, state.inventories, demands)
    _guard_exhaustive(instance.n, demands.shape[1])
    cache = cache or shared_cache(instance.gamma)
    solver = _ExhaustiveSolver(instance, state.inventories, demands, cache)
    masks = solver.schedule_masks()
    logger.debug("exhaustive det-IRP n=%d H=%d explored %d states", instance.n, demands.shape[1], len(solver._memo))
    return VisitSchedule.from_visits(_masks_to_visits(masks, instance.n), cache)


# ---------------------------------------------------------------------------
# local search

def greedy_schedule(evaluator: ScheduleEvaluator) -> np.ndarray:
    """Visit a customer in every period whose demand would otherwise cause a stock-out"""
    inst = evaluator.instance
    inventories = evaluator.inventories.copy()
    visits = np.zeros((evaluator.H, evaluator.n), dtype=bool)
    for h in range(evaluator.H):
        d = evaluator.demands[:, h]
        visits[h] = inventories < d
        z = visits[h].astype(float)
        inventories = np.maximum(post_demand_levels(inst.C, inventories, z, d), 0.0)
    return visits


def repair_schedule(evaluator: ScheduleEvaluator, visits: np.ndarray) -> np.ndarray:
    """
    Restore capacity feasibility period by period by dropping, each time,
    the visit with the smallest cost increase per unit of freed capacity.
    """
    visits = visits.copy()
    B = evaluator.instance.B
    for h in range(evaluator.H):
        while True:
            cost, loads, quantities = evaluator.simulate(visits)
            if loads[h] <= B + FEASIBILITY_TOL:
                break
            best_i, best_density = -1, np.inf
            for i in np.flatnonzero(visits[h]):
                q = quantities[h, i]
                if q <= 0:
                    continue
                visits[h, i] = False
                dropped_cost = evaluator.simulate(visits)[0]
                visits[h, i] = True
                density = (dropped_cost - cost) / q
                if density < best_density:
                    best_i, best_density = int(i), density
            visits[h, best_i] = False
    return visits


def _neighbourhood(H: int, n: int) -> List[Tuple]:
    moves: List[Tuple] = [("flip", h, i) for h in range(H) for i in range(n)]
    moves += [("move", i, h, g) for i in range(n) for h in range(H) for g in range(H) if g != h]
    moves += [("swap", h, g) for h in range(H) for g in range(h + 1, H)]
    return moves


def _apply(visits: np.ndarray, move: Tuple) -> Optional[np.ndarray]:
    kind = move[0]
    if kind == "flip":
        _, h, i = move
        candidate = visits.copy()
        candidate[h, i] = not candidate[h, i]
        return candidate
    if kind == "move":
        _, i, h, g = move
        if not visits[h, i] or visits[g, i]:
            return None
        candidate = visits.copy()
        candidate[h, i], candidate[g, i] = False, True
        return candidate
    _, h, g = move
    if np.array_equal(visits[h], visits[g]):
        return None
    candidate = visits.copy()
    candidate[[h, g]] = candidate[[g, h]]
    return candidate


def _improves(candidate: float, incumbent: float) -> bool:
    return candidate < incumbent - 1e-9 * max(1.0, abs(incumbent))


def _descend(evaluator: ScheduleEvaluator, visits: np.ndarray, cost: float, moves: List[Tuple],
             rng: np.random.Generator, remaining: int) -> Tuple[np.ndarray, float, int]:
    while remaining > 0:
        improved = False
        for k in rng.permutation(len(moves)):
            candidate = _apply(visits, moves[k])
            if candidate is None:
                continue
            remaining -= 1
            value, loads, _ = evaluator.simulate(candidate)
            if evaluator.feasible(loads) and _improves(value, cost):
                visits, cost, improved = candidate, value, True
                break
            if remaining <= 0:
                break
        if not improved:
            break
    return visits, cost, remaining


def solve_local_search(instance: Instance, state: State, demands: np.ndarray, seed: int = 0,
                       budget: int = 50_000, restarts: int = 5, initial: Optional[VisitSchedule] = None,
                       cache: Optional[TourCostCache] = None) -> VisitSchedule:
    """
    Multi-restart first-improvement local search over flip, move and swap
    neighbourhoods. `budget` counts candidate evaluations across restarts;
    budget=0 returns the repaired starting schedule.
    """
    demands = _check_inputs(instance, state.inventories, demands)
    cache = cache or shared_cache(instance.gamma)
    evaluator = ScheduleEvaluator(instance, state.inventories, demands, cache)
    start = initial.visits.copy() if initial is not None else greedy_schedule(evaluator)
    best = repair_schedule(evaluator, start)
    best_cost = evaluator.simulate(best)[0]
    moves = _neighbourhood(evaluator.H, evaluator.n)
    rng = np.random.default_rng(seed)
    remaining = budget
    flips = max(1, int(round(0.1 * evaluator.H * evaluator.n)))
    for restart in range(max(1, restarts)):
        if remaining <= 0:
            break
        if restart == 0:
            current = best.copy()
        else:
            current = best.copy()
            for k in rng.choice(evaluator.H * evaluator.n, size=flips, replace=False):
                h, i = divmod(int(k), evaluator.n)
                current[h, i] = not current[h, i]
            current = repair_schedule(evaluator, current)
        cost = evaluator.simulate(current)[0]
        current, cost, remaining = _descend(evaluator, current, cost, moves, rng, remaining)
        if _improves(cost, best_cost):
            best, best_cost = current, cost
    logger.debug("local search n=%d H=%d: cost %.3f after %d evaluations",
                 instance.n, evaluator.H, best_cost, evaluator.evaluations)
    return VisitSchedule.from_visits(best, cache)


# ---------------------------------------------------------------------------
# entry points used by policies and the trainer

def solve(instance: Instance, state: State, demands: np.ndarray, solver: Optional[SolverConfig] = None,
          seed: Optional[int] = None, restarts: Optional[int] = None, budget: Optional[int] = None,
          cache: Optional[TourCostCache] = None) -> VisitSchedule:
    """Exhaustive when within the guard, local search otherwise"""
    solver = solver or SolverConfig()
    demands = _check_inputs(instance, state.inventories, demands)
    if within_exhaustive_guard(instance.n, demands.shape[1], solver):
        return solve_exhaustive(instance, state, demands, cache)
    return solve_local_search(instance, state, demands,
                              seed=solver.seed if seed is None else seed,
                              budget=solver.ls_budget if budget is None else budget,
                              restarts=solver.ls_restarts if restarts is None else restarts,
                              cache=cache)


def anticipative_first_decision(instance: Instance, state: State, future_demands: np.ndarray,
                                solver: Optional[SolverConfig] = None, seed: Optional[int] = None,
                                cache: Optional[TourCostCache] = None) -> Tour:
    """First-period tour of the deterministic IRP solved on `future_demands`"""
    return solve(instance, state, future_demands, solver, seed=seed, cache=cache).first_tour


def first_period_values(instance: Instance, state: State, demands: np.ndarray,
                        solver: Optional[SolverConfig] = None, candidates: Optional[Sequence[int]] = None,
                        seed: int = 0, cache: Optional[TourCostCache] = None) -> np.ndarray:
    """
    For every first-period subset: its period cost plus the optimal (or
    local-search) continuation cost from the state it leads to. Infeasible
    and non-candidate subsets get +inf.
    """
    solver = solver or SolverConfig()
    demands = _check_inputs(instance, state.inventories, demands)
    cache = cache or shared_cache(instance.gamma)
    H = demands.shape[1]
    if candidates is None and within_exhaustive_guard(instance.n, H, solver):
        return _ExhaustiveSolver(instance, state.inventories, demands, cache).node_values(0, 0)

    values = np.full(1 << instance.n, np.inf)
    quantities = instance.C - state.inventories
    loads = subset_sums(quantities)
    pool = range(1 << instance.n) if candidates is None else candidates
    for mask in pool:
        mask = int(mask)
        if loads[mask] > instance.B + FEASIBILITY_TOL:
            continue
        z = ((mask >> np.arange(instance.n)) & 1).astype(float)
        levels = post_demand_levels(instance.C, state.inventories, z, demands[:, 0])
        first = period_cost(instance.kappa, instance.rho, levels, float(cache.costs()[mask])).total
        if H == 1:
            values[mask] = first
            continue
        after = State(state.t + 1, np.maximum(levels, 0.0), state.history)
        rest = demands[:, 1:]
        if within_exhaustive_guard(instance.n, H - 1, solver):
            tail = solve_exhaustive(instance, after, rest, cache)
        else:
            tail = solve_local_search(instance, after, rest, seed=seed, budget=solver.saa3_continuation_budget,
                                      restarts=1, cache=cache)
        values[mask] = first + schedule_cost(instance, after, rest, tail)
    return values


def pick_first_period(values: np.ndarray, n: int) -> int:
    """argmin with the exhaustive solver's tie-break (lexicographically smallest row)"""
    best = values.min()
    if not np.isfinite(best):
        return 0
    ties = np.flatnonzero(values == best)
    keys = np.zeros(ties.size, dtype=np.int64)
    for b in range(n):
        keys += ((ties >> b) & 1) << (n - 1 - b)
    return int(ties[np.argmin(keys)])
