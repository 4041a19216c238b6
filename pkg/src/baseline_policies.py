# src/baseline_policies.py
"""
Rolling-horizon policies: Mean, SAA-1, SAA-3, the ML-CO pipeline and the
full-knowledge anticipative baseline. Every policy object maps a State to
the Tour executed in the current period.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.spatial import distance

from config import POLICIES, SolverConfig
from cpctsp_oracle import Tour, TourCostCache, shared_cache, solve_with_value
from deterministic_irp import (anticipative_first_decision, first_period_values, pick_first_period, solve,
                               within_exhaustive_guard)
from errors import RejectedInputError
from instance_generator import Episode, Instance
from inventory_mdp import CostBreakdown, State, Trajectory, rollout
from prize_model import ModelParams, QuantileConfig, prize_forward

logger = logging.getLogger(__name__)

SAA3_SCENARIOS = 3


@dataclass(frozen=True)
class PolicySpec:
    tag: str
    lookahead: int = 6
    params: Optional[ModelParams] = None
    scenario_count: int = SAA3_SCENARIOS

    def __post_init__(self):
        if self.tag not in POLICIES:
            raise RejectedInputError(f"unknown policy {self.tag!r}")
        if self.tag == "saa3" and self.scenario_count != SAA3_SCENARIOS:
            raise RejectedInputError("saa3 always uses three scenarios")
        if self.tag == "mlco" and self.params is None:
            raise RejectedInputError("mlco needs trained parameters")
        if self.lookahead < 1:
            raise RejectedInputError("look-ahead must be >= 1")


def mean_demands(state: State, H: int) -> np.ndarray:
    """n x H matrix repeating each customer's historical mean"""
    return np.repeat(state.history.mean(axis=1)[:, None], H, axis=1)


def _nearest_columns(state: State, count: int) -> np.ndarray:
    """History columns closest to the current feature vector (ties: smaller index)"""
    if state.history_context is None or state.context_window is None or state.context_window.shape[0] == 0:
        raise RejectedInputError("contextual selection needs the current features and the history features")
    distances = distance.cdist(state.context_window[:1], state.history_context.T)[0]
    return np.argsort(distances, kind="stable")[:count]


def select_observations(state: State, count: int, contextual: bool) -> np.ndarray:
    """`count` history column indices: nearest by features, or the most recent ones"""
    L = state.history.shape[1]
    if count > L:
        raise RejectedInputError(f"need {count} history observations, have {L}")
    if contextual:
        return _nearest_columns(state, count)
    return np.arange(L - 1, L - 1 - count, -1)


class _RollingPolicy:
    name = "policy"

    def __init__(self, instance: Instance, lookahead: int, solver: Optional[SolverConfig] = None,
                 cache: Optional[TourCostCache] = None, seed: int = 0):
        if lookahead < 1:
            raise RejectedInputError("look-ahead must be >= 1")
        self.instance = instance
        self.H = lookahead
        self.solver = solver or SolverConfig()
        self.cache = cache or shared_cache(instance.gamma)
        self.seed = seed

    def decide_on(self, state: State, demands: np.ndarray) -> Tour:
        return anticipative_first_decision(self.instance, state, demands, self.solver,
                                           seed=self.seed + state.t, cache=self.cache)


class MeanPolicy(_RollingPolicy):
    name = "mean"

    def __call__(self, state: State) -> Tour:
        return self.decide_on(state, mean_demands(state, self.H))


class SAA1Policy(_RollingPolicy):
    name = "saa1"

    def __init__(self, *args, repeat: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.repeat = repeat

    def scenario(self, state: State) -> np.ndarray:
        column = int(select_observations(state, 1, self.instance.is_contextual)[0])
        observation = state.history[:, column]
        if self.repeat:
            return np.repeat(observation[:, None], self.H, axis=1)
        demands = mean_demands(state, self.H)
        demands[:, 0] = observation
        return demands

    def __call__(self, state: State) -> Tour:
        return self.decide_on(state, self.scenario(state))


class SAA3Policy(_RollingPolicy):
    """
    Three first-period scenarios sharing mean demands afterwards; the tour
    minimises the scenario-average of period cost plus optimal continuation.
    """
    name = "saa3"

    def scenarios(self, state: State) -> List[np.ndarray]:
        columns = select_observations(state, SAA3_SCENARIOS, self.instance.is_contextual)
        base = mean_demands(state, self.H)
        scenarios = []
        for column in columns:
            demands = base.copy()
            demands[:, 0] = state.history[:, int(column)]
            scenarios.append(demands)
        return scenarios

    def __call__(self, state: State) -> Tour:
        return self.decide(state, self.scenarios(state))

    def decide(self, state: State, scenarios: List[np.ndarray]) -> Tour:
        distinct = []
        for demands in scenarios:
            if not any(np.array_equal(demands, seen) for seen in distinct):
                distinct.append(demands)
        if len(distinct) == 1:
            return self.decide_on(state, distinct[0])
        if self.instance.n <= self.solver.saa3_enumeration_max_n:
            values = np.mean([self._values(state, d) for d in scenarios], axis=0)
            return self.cache.tour(pick_first_period(values, self.instance.n))
        return self._first_period_search(state, scenarios)

    def _values(self, state: State, demands: np.ndarray, candidates=None) -> np.ndarray:
        return first_period_values(self.instance, state, demands, self.solver, candidates=candidates,
                                   seed=self.seed + state.t, cache=self.cache)

    def _average(self, state: State, scenarios: List[np.ndarray], mask: int) -> float:
        return float(np.mean([self._values(state, d, [mask])[mask] for d in scenarios]))

    def _first_period_search(self, state: State, scenarios: List[np.ndarray]) -> Tour:
        """Flip-move local search over first-period subsets seeded by each scenario's own decision"""
        n = self.instance.n
        starts = sorted({self.decide_on(state, d).mask for d in scenarios})
        scores = {mask: self._average(state, scenarios, mask) for mask in starts}
        best = min(starts, key=lambda m: (scores[m], m))
        improved = True
        while improved:
            improved = False
            for i in range(n):
                candidate = best ^ (1 << i)
                if candidate not in scores:
                    scores[candidate] = self._average(state, scenarios, candidate)
                if scores[candidate] < scores[best]:
                    best, improved = candidate, True
                    break
        return self.cache.tour(best)


class MLCOPolicy:
    """Prize model followed by the exact CPCTSP oracle"""
    name = "mlco"

    def __init__(self, instance: Instance, params: ModelParams, config: QuantileConfig,
                 cache: Optional[TourCostCache] = None):
        if params.w3.shape != (config.H, config.P):
            raise RejectedInputError("parameter shapes do not match the quantile configuration")
        self.instance = instance
        self.params = params
        self.config = config
        self.cache = cache or shared_cache(instance.gamma)

    def prizes(self, state: State) -> np.ndarray:
        return prize_forward(state, self.instance, self.params, self.config)

    def __call__(self, state: State) -> Tour:
        theta = self.prizes(state)
        quantities = self.instance.C - state.inventories
        return solve_with_value(theta, quantities, self.instance.B, self.instance.gamma, self.cache)[0]


def mean_policy(instance: Instance, state: State, H: int, solver: Optional[SolverConfig] = None) -> Tour:
    return MeanPolicy(instance, H, solver)(state)


def saa1_policy(instance: Instance, state: State, H: int, solver: Optional[SolverConfig] = None,
                repeat: bool = False) -> Tour:
    return SAA1Policy(instance, H, solver, repeat=repeat)(state)


def saa3_policy(instance: Instance, state: State, H: int, seed: int = 0,
                solver: Optional[SolverConfig] = None) -> Tour:
    return SAA3Policy(instance, H, solver, seed=seed)(state)


def mlco_policy(instance: Instance, state: State, params: ModelParams, config: QuantileConfig) -> Tour:
    return MLCOPolicy(instance, params, config)(state)


def build_policy(spec: PolicySpec, instance: Instance, solver: Optional[SolverConfig] = None,
                 quantiles: Optional[QuantileConfig] = None, saa1_repeat: bool = False,
                 seed: int = 0) -> Callable[[State], Tour]:
    if spec.tag == "mean":
        return MeanPolicy(instance, spec.lookahead, solver, seed=seed)
    if spec.tag == "saa1":
        return SAA1Policy(instance, spec.lookahead, solver, seed=seed, repeat=saa1_repeat)
    if spec.tag == "saa3":
        return SAA3Policy(instance, spec.lookahead, solver, seed=seed)
    if spec.tag == "mlco":
        config = quantiles or QuantileConfig(horizon=spec.lookahead)
        return MLCOPolicy(instance, spec.params, config)
    raise RejectedInputError("the anticipative baseline is not a rolling policy; use anticipative_baseline")


class _Replay:
    def __init__(self, tours: List[Tour]):
        self.tours = tours

    def __call__(self, state: State) -> Tour:
        return self.tours[state.t]


def anticipative_trajectory(instance: Instance, episode: Episode, x0: State,
                            solver: Optional[SolverConfig] = None, seed: int = 0) -> Tuple[Trajectory, CostBreakdown]:
    """Solve the whole remaining horizon with the true demands and roll the schedule out"""
    solver = solver or SolverConfig()
    demands = episode.demand[:, :episode.T]
    restarts = None if within_exhaustive_guard(instance.n, episode.T, solver) else solver.anticipative_restarts
    schedule = solve(instance, x0, demands, solver, seed=seed, restarts=restarts)
    return rollout(instance, _Replay(list(schedule.tours)), episode, x0)


def anticipative_baseline(instance: Instance, episode: Episode, x0: State,
                          solver: Optional[SolverConfig] = None, seed: int = 0) -> Tuple[List[Tour], float]:
    trajectory, total = anticipative_trajectory(instance, episode, x0, solver, seed)
    return trajectory.tours(), total.total
