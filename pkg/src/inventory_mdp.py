# src/inventory_mdp.py
"""
The DSIRP as a Markov decision process: states, feasibility, per-period
costs, order-up-to transitions and rollouts.

Rewards are handled as positive costs to minimise; this is the only place
where the sign convention is fixed.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cpctsp_oracle import FEASIBILITY_TOL, Tour, routing_cost
from errors import ContractViolationError, PolicyInfeasibleError, RejectedInputError
from instance_generator import Episode, Instance

logger = logging.getLogger(__name__)

Policy = Callable[["State"], Tour]


def _frozen(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if array is None:
        return None
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class State:
    """
    x^t: inventories, the demand history window (n x L, oldest first) and,
    for contextual instances, the feature vectors of periods t..t+H-1
    (H x F) plus the features aligned with the history (F x L).
    """
    t: int
    inventories: np.ndarray
    history: np.ndarray
    context_window: Optional[np.ndarray] = None
    history_context: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "inventories", _frozen(self.inventories))
        object.__setattr__(self, "history", _frozen(self.history))
        object.__setattr__(self, "context_window", _frozen(self.context_window))
        object.__setattr__(self, "history_context", _frozen(self.history_context))
        if self.history.ndim != 2 or self.history.shape[0] != self.inventories.size:
            raise RejectedInputError("history must be an n x L matrix")

    @property
    def n(self) -> int:
        return self.inventories.size


@dataclass(frozen=True)
class CostBreakdown:
    holding: float = 0.0
    stockout: float = 0.0
    routing: float = 0.0
    total: float = 0.0

    @classmethod
    def from_parts(cls, holding: float, stockout: float, routing: float) -> "CostBreakdown":
        return cls(holding, stockout, routing, holding + stockout + routing)

    @classmethod
    def aggregate(cls, costs: Sequence["CostBreakdown"]) -> "CostBreakdown":
        """Component-wise exact sums; total is the exact sum of the period totals"""
        return cls(
            math.fsum(c.holding for c in costs),
            math.fsum(c.stockout for c in costs),
            math.fsum(c.routing for c in costs),
            math.fsum(c.total for c in costs),
        )


def visit_vector(tour: Tour, n: int) -> np.ndarray:
    """z_i = 1 iff customer i is on the tour"""
    tour.validate(n)
    z = np.zeros(n)
    for i in tour.sequence:
        z[i - 1] = 1.0
    return z


def edge_vector(tour: Tour, n: int) -> np.ndarray:
    """Symmetric edge-usage matrix u over vertices 0..n (a lone customer uses its depot edge twice)"""
    tour.validate(n)
    u = np.zeros((n + 1, n + 1), dtype=int)
    if not tour.sequence:
        return u
    path = (0,) + tour.sequence + (0,)
    for a, b in zip(path[:-1], path[1:]):
        u[a, b] += 1
        if a != b:
            u[b, a] += 1
    if len(tour.sequence) == 1:
        # out-and-back: the single edge counts once per direction above
        i = tour.sequence[0]
        u[0, i] = u[i, 0] = 2
    return u


def visits_from_edges(u: np.ndarray) -> np.ndarray:
    """g(u): half the degree of every customer vertex"""
    return u[1:, :].sum(axis=1) / 2.0


def replenishment_quantities(instance: Instance, inventories: np.ndarray) -> np.ndarray:
    """q_i = C_i - I_i, what a visit delivers under order-up-to"""
    return instance.C - np.asarray(inventories, dtype=float)


def delivered_quantity(instance: Instance, state: State, tour: Tour) -> float:
    z = visit_vector(tour, instance.n)
    return float(np.dot(replenishment_quantities(instance, state.inventories), z))


def is_feasible(instance: Instance, state: State, tour: Tour) -> bool:
    return delivered_quantity(instance, state, tour) <= instance.B + FEASIBILITY_TOL


def post_demand_levels(capacity: np.ndarray, inventories: np.ndarray, z: np.ndarray,
                       demand: np.ndarray) -> np.ndarray:
    """I(1-z) + Cz - d, before taking the positive part"""
    return inventories * (1.0 - z) + capacity * z - demand


def period_cost(kappa: np.ndarray, rho: float, levels: np.ndarray, routing: float) -> CostBreakdown:
    holding = float(np.sum(kappa * np.maximum(levels, 0.0)))
    stockout = float(np.sum(rho * kappa * np.maximum(-levels, 0.0)))
    return CostBreakdown.from_parts(holding, stockout, routing)


def _check_feasible(instance: Instance, state: State, tour: Tour):
    load = delivered_quantity(instance, state, tour)
    if load > instance.B + FEASIBILITY_TOL:
        raise ContractViolationError(
            f"period {state.t}: delivery of {load:.4f} exceeds vehicle capacity {instance.B:.4f}",
            period=state.t, load=load, capacity=instance.B)


def step_cost(instance: Instance, state: State, tour: Tour, demand: np.ndarray) -> CostBreakdown:
    """Holding, stock-out and routing cost of one period"""
    _check_feasible(instance, state, tour)
    z = visit_vector(tour, instance.n)
    levels = post_demand_levels(instance.C, state.inventories, z, np.asarray(demand, dtype=float))
    return period_cost(instance.kappa, instance.rho, levels, routing_cost(tour, instance.gamma))


def transition(instance: Instance, state: State, tour: Tour, demand: np.ndarray,
               next_context_window: Optional[np.ndarray] = None) -> State:
    """
    Order-up-to replenishment, demand subtraction without backlog, history
    shift, and context window advance.
    """
    _check_feasible(instance, state, tour)
    demand = np.asarray(demand, dtype=float)
    z = visit_vector(tour, instance.n)
    inventories = np.maximum(post_demand_levels(instance.C, state.inventories, z, demand), 0.0)
    history = np.concatenate([state.history[:, 1:], demand[:, None]], axis=1)
    history_context = state.history_context
    if history_context is not None and state.context_window is not None:
        history_context = np.concatenate([history_context[:, 1:], state.context_window[0][:, None]], axis=1)
    return State(state.t + 1, inventories, history, next_context_window, history_context)


def context_window(episode: Episode, t: int, lookahead: int) -> Optional[np.ndarray]:
    """Feature vectors of periods t..t+H-1 (fewer if the episode runs out)"""
    if episode.context is None:
        return None
    return episode.context[:, t:t + lookahead].T


def initial_state(instance: Instance, history: Episode, episode: Optional[Episode] = None,
                  lookahead: int = 1, inventories: Optional[np.ndarray] = None) -> State:
    """x0: t=0, I0 (unless given), the history window and the first H feature vectors"""
    window = None
    history_context = None
    if instance.is_contextual:
        if episode is None or episode.context is None or history.context is None:
            raise RejectedInputError("contextual instances need feature columns in both history and episode")
        window = context_window(episode, 0, lookahead)
        history_context = history.context[:, :history.T]
    start = instance.I0 if inventories is None else inventories
    return State(0, start, history.demand, window, history_context)


@dataclass
class TrajectoryStep:
    period: int
    state: State
    tour: Tour
    demand: np.ndarray
    cost: CostBreakdown
    delivered: float
    decision_seconds: float = 0.0


@dataclass
class Trajectory:
    steps: List[TrajectoryStep] = field(default_factory=list)

    def tours(self) -> List[Tour]:
        return [step.tour for step in self.steps]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "period": [s.period for s in self.steps],
            "customer_visits": [s.tour.mask for s in self.steps],
            "delivered_units_total": [s.delivered for s in self.steps],
            "holding": [s.cost.holding for s in self.steps],
            "stockout": [s.cost.stockout for s in self.steps],
            "routing": [s.cost.routing for s in self.steps],
            "total": [s.cost.total for s in self.steps],
        })

    def export_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def rollout(instance: Instance, policy: Policy, episode: Episode, x0: State) -> Tuple[Trajectory, CostBreakdown]:
    """Apply the policy for t = 0..T-1 and accumulate the period costs"""
    lookahead = 0 if x0.context_window is None else x0.context_window.shape[0]
    trajectory = Trajectory()
    state = x0
    for t in range(episode.T):
        started = time.perf_counter()
        tour = policy(state)
        elapsed = time.perf_counter() - started
        tour.validate(instance.n)
        load = delivered_quantity(instance, state, tour)
        if load > instance.B + FEASIBILITY_TOL:
            raise PolicyInfeasibleError(
                f"period {t}: policy delivers {load:.4f} > vehicle capacity {instance.B:.4f}",
                period=t, load=load, capacity=instance.B)
        demand = episode.demand[:, t]
        cost = step_cost(instance, state, tour, demand)
        trajectory.steps.append(TrajectoryStep(t, state, tour, demand, cost, load, elapsed))
        window = context_window(episode, t + 1, lookahead) if lookahead else None
        state = transition(instance, state, tour, demand, window)
    total = CostBreakdown.aggregate([step.cost for step in trajectory.steps])
    logger.debug("rollout over %d periods: total cost %.3f", episode.T, total.total)
    return trajectory, total


def relative_gap(policy_cost: float, anticipative_cost: float) -> float:
    """(policy - anticipative) / anticipative"""
    if not anticipative_cost > 0:
        raise RejectedInputError(f"anticipative cost must be positive, got {anticipative_cost}")
    return (policy_cost - anticipative_cost) / anticipative_cost
