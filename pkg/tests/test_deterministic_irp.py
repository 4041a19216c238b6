# tests/test_deterministic_irp.py
import itertools
import os
import sys
import unittest

import numpy as np

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config import SolverConfig
from cpctsp_oracle import Tour, shared_cache
from deterministic_irp import (ScheduleEvaluator, VisitSchedule, anticipative_first_decision, first_period_values,
                               greedy_schedule, pick_first_period, repair_schedule, schedule_cost, solve,
                               solve_exhaustive, solve_local_search)
from errors import CapabilityError, ContractViolationError, RejectedInputError
from instance_generator import InstanceGenerator
from inventory_mdp import State, step_cost


class DetIRPTestCase(unittest.TestCase):
    n = 3
    H = 3

    def setUp(self):
        generator = InstanceGenerator()
        self.instance = generator.generate_instance("normal", self.n, "low", seed=31)
        history = generator.sample_history(self.instance, 20, seed=32)
        self.state = State(0, self.instance.I0, history.demand)
        self.demands = generator.sample_episode(self.instance, self.H, seed=33).demand
        self.cache = shared_cache(self.instance.gamma)

    def all_schedules(self):
        for flags in itertools.product((False, True), repeat=self.H * self.n):
            yield VisitSchedule.from_visits(np.array(flags).reshape(self.H, self.n), self.cache)

    def feasible_costs(self):
        costs = []
        for schedule in self.all_schedules():
            try:
                costs.append(schedule_cost(self.instance, self.state, self.demands, schedule))
            except ContractViolationError:
                continue
        return costs


class TestScheduleCost(DetIRPTestCase):
    """Cost of a fixed schedule"""

    def test_no_visits(self):
        """Without visits only holding and stock-out costs accrue"""
        schedule = VisitSchedule.from_visits(np.zeros((self.H, self.n), dtype=bool), self.cache)
        inventories = np.array(self.instance.I0)
        expected = 0.0
        for h in range(self.H):
            levels = inventories - self.demands[:, h]
            expected += float(np.sum(self.instance.kappa * np.maximum(levels, 0.0)))
            expected += float(np.sum(self.instance.rho * self.instance.kappa * np.maximum(-levels, 0.0)))
            inventories = np.maximum(levels, 0.0)
        self.assertAlmostEqual(schedule_cost(self.instance, self.state, self.demands, schedule), expected, places=6)

    def test_single_period_equals_step_cost(self):
        """With one period the schedule cost is the MDP step cost"""
        demands = self.demands[:, :1]
        for mask in range(1 << self.n):
            visits = ((mask >> np.arange(self.n)) & 1).astype(bool)[None, :]
            schedule = VisitSchedule.from_visits(visits, self.cache)
            try:
                cost = schedule_cost(self.instance, self.state, demands, schedule)
            except ContractViolationError:
                with self.assertRaises(ContractViolationError):
                    step_cost(self.instance, self.state, schedule.first_tour, demands[:, 0])
                continue
            expected = step_cost(self.instance, self.state, schedule.first_tour, demands[:, 0]).total
            self.assertAlmostEqual(cost, expected, places=9)

    def test_evaluator_agrees(self):
        """The fast evaluator reproduces schedule_cost"""
        evaluator = ScheduleEvaluator(self.instance, self.state.inventories, self.demands, self.cache)
        rng = np.random.default_rng(1)
        for _ in range(10):
            visits = rng.random((self.H, self.n)) < 0.4
            schedule = VisitSchedule.from_visits(visits, self.cache)
            cost, loads, _ = evaluator.simulate(visits)
            if evaluator.feasible(loads):
                self.assertAlmostEqual(cost, schedule_cost(self.instance, self.state, self.demands, schedule),
                                       places=9)

    def test_capacity_violation_names_period(self):
        """An overloaded period raises with its index"""
        tight = InstanceGenerator().generate_instance("normal", self.n, "low", seed=31)
        tight.B = 1.0
        state = State(0, tight.C * 0.0, self.state.history)
        visits = np.zeros((self.H, self.n), dtype=bool)
        visits[1, 0] = True
        with self.assertRaises(ContractViolationError) as ctx:
            schedule_cost(tight, state, self.demands, VisitSchedule.from_visits(visits, self.cache))
        self.assertEqual(ctx.exception.period, 1)

    def test_visit_flags_must_match_tours(self):
        """Tours and flags describe the same customers"""
        with self.assertRaises(RejectedInputError):
            VisitSchedule(np.array([[True, False, False]]), (Tour((2,)),))


class TestExhaustive(DetIRPTestCase):
    """Exact dynamic program"""

    def test_matches_enumeration(self):
        """The DP optimum is the best of all feasible schedules"""
        schedule = solve_exhaustive(self.instance, self.state, self.demands, self.cache)
        cost = schedule_cost(self.instance, self.state, self.demands, schedule)
        self.assertAlmostEqual(cost, min(self.feasible_costs()), places=6)

    def test_guard(self):
        """Too many customers or periods are refused"""
        generator = InstanceGenerator()
        big = generator.generate_instance("normal", 7, "low", seed=1)
        state = State(0, big.I0, np.zeros((7, 3)))
        with self.assertRaises(CapabilityError):
            solve_exhaustive(big, state, np.ones((7, 2)))
        with self.assertRaises(CapabilityError):
            solve_exhaustive(self.instance, self.state, np.ones((self.n, 5)))

    def test_first_period_values(self):
        """Root values give the optimum and the same first decision"""
        schedule = solve_exhaustive(self.instance, self.state, self.demands, self.cache)
        values = first_period_values(self.instance, self.state, self.demands, cache=self.cache)
        self.assertAlmostEqual(values.min(), schedule_cost(self.instance, self.state, self.demands, schedule),
                               places=6)
        self.assertEqual(pick_first_period(values, self.n), schedule.first_tour.mask)

    def test_enumerated_values_agree(self):
        """Explicit enumeration of first-period subsets matches the DP root"""
        root = first_period_values(self.instance, self.state, self.demands, cache=self.cache)
        enumerated = first_period_values(self.instance, self.state, self.demands,
                                         candidates=range(1 << self.n), cache=self.cache)
        np.testing.assert_allclose(enumerated, root, rtol=1e-9, atol=1e-6)

    def test_pick_first_period_tie_break(self):
        """Ties go to the lexicographically smallest row, customer 1 first"""
        values = np.array([5.0, 1.0, 1.0, 3.0])
        # mask 1 = (1, 0) and mask 2 = (0, 1); (0, 1) is smaller
        self.assertEqual(pick_first_period(values, 2), 2)
        self.assertEqual(pick_first_period(np.full(4, np.inf), 2), 0)


class TestLocalSearch(DetIRPTestCase):
    """Heuristic solver"""

    def test_zero_budget_returns_start(self):
        """Without evaluations the repaired greedy schedule comes back"""
        evaluator = ScheduleEvaluator(self.instance, self.state.inventories, self.demands, self.cache)
        expected = repair_schedule(evaluator, greedy_schedule(evaluator))
        schedule = solve_local_search(self.instance, self.state, self.demands, budget=0, cache=self.cache)
        np.testing.assert_array_equal(schedule.visits, expected)

    def test_never_worse_than_start(self):
        """Local search only accepts improvements"""
        start = solve_local_search(self.instance, self.state, self.demands, budget=0, cache=self.cache)
        improved = solve_local_search(self.instance, self.state, self.demands, budget=2000, cache=self.cache)
        self.assertLessEqual(schedule_cost(self.instance, self.state, self.demands, improved),
                             schedule_cost(self.instance, self.state, self.demands, start) + 1e-9)

    def test_optimal_start_is_kept(self):
        """Starting from the optimum cannot be improved"""
        optimum = solve_exhaustive(self.instance, self.state, self.demands, self.cache)
        best = schedule_cost(self.instance, self.state, self.demands, optimum)
        schedule = solve_local_search(self.instance, self.state, self.demands, initial=optimum, cache=self.cache)
        self.assertAlmostEqual(schedule_cost(self.instance, self.state, self.demands, schedule), best, places=6)

    def test_seeded(self):
        """Same seed, same schedule"""
        a = solve_local_search(self.instance, self.state, self.demands, seed=4, budget=500, cache=self.cache)
        b = solve_local_search(self.instance, self.state, self.demands, seed=4, budget=500, cache=self.cache)
        self.assertEqual(a, b)

    def test_repair_restores_capacity(self):
        """Overloaded periods are repaired before the search starts"""
        instance = InstanceGenerator().generate_instance("normal", self.n, "low", seed=31)
        instance.B = float(np.sort(instance.C)[0])
        state = State(0, np.zeros(self.n), self.state.history)
        schedule = solve_local_search(instance, state, self.demands, budget=300)
        self.assertLessEqual(float(np.dot(instance.C, schedule.visits[0])), instance.B + 1e-9)
        # raises if any later period is overloaded
        self.assertTrue(np.isfinite(schedule_cost(instance, state, self.demands, schedule)))


class TestDispatch(DetIRPTestCase):
    """Solver selection"""

    def test_solve_uses_exhaustive_within_guard(self):
        """Small problems are solved exactly"""
        exact = solve_exhaustive(self.instance, self.state, self.demands, self.cache)
        self.assertEqual(solve(self.instance, self.state, self.demands, cache=self.cache), exact)

    def test_solve_falls_back_to_local_search(self):
        """A tighter guard routes to the heuristic"""
        solver = SolverConfig(exhaustive_max_n=2, ls_budget=0)
        schedule = solve(self.instance, self.state, self.demands, solver, cache=self.cache)
        expected = solve_local_search(self.instance, self.state, self.demands, budget=0, cache=self.cache)
        self.assertEqual(schedule, expected)

    def test_anticipative_first_decision(self):
        """The first tour of the optimal schedule"""
        exact = solve_exhaustive(self.instance, self.state, self.demands, self.cache)
        tour = anticipative_first_decision(self.instance, self.state, self.demands, cache=self.cache)
        self.assertEqual(tour, exact.first_tour)

    def test_rejects_bad_demands(self):
        """Demands are n x H"""
        with self.assertRaises(RejectedInputError):
            solve(self.instance, self.state, np.ones(self.n))


if __name__ == '__main__':
    unittest.main(verbosity=2)
