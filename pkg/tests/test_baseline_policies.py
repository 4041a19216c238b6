# tests/test_baseline_policies.py
import os
import sys
import unittest

import numpy as np

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from baseline_policies import (MeanPolicy, MLCOPolicy, PolicySpec, SAA1Policy, SAA3Policy, anticipative_baseline,
                               anticipative_trajectory, build_policy, mean_demands, mean_policy, mlco_policy,
                               saa1_policy, saa3_policy, select_observations)
from config import SolverConfig
from cpctsp_oracle import shared_cache, solve
from deterministic_irp import anticipative_first_decision, first_period_values
from errors import RejectedInputError
from instance_generator import InstanceGenerator
from inventory_mdp import State, initial_state, is_feasible, rollout
from prize_model import ModelParams, QuantileConfig, prize_forward


class PolicyTestCase(unittest.TestCase):

    def setUp(self):
        self.generator = InstanceGenerator()
        self.instance = self.generator.generate_instance("normal", 4, "low", seed=71)
        self.history = self.generator.sample_history(self.instance, 20, seed=72)
        self.state = initial_state(self.instance, self.history)
        self.cache = shared_cache(self.instance.gamma)


class TestScenarios(PolicyTestCase):
    """Scenario construction"""

    def test_mean_demands(self):
        """Historical mean repeated over the look-ahead"""
        demands = mean_demands(self.state, 3)
        self.assertEqual(demands.shape, (4, 3))
        np.testing.assert_allclose(demands[:, 2], self.history.demand.mean(axis=1))

    def test_most_recent_observations(self):
        """Without context the latest columns are used, newest first"""
        np.testing.assert_array_equal(select_observations(self.state, 3, False), [19, 18, 17])
        with self.assertRaises(RejectedInputError):
            select_observations(self.state, 21, False)

    def test_nearest_observations(self):
        """With context the columns closest to today's features are used"""
        history_context = np.zeros((8, 5))
        history_context[0] = [0.0, 5.0, 1.0, 9.0, 1.0]
        window = np.zeros((2, 8))
        window[0, 0] = 1.2
        state = State(0, self.instance.I0, self.history.demand[:, :5], window, history_context)
        # columns 2 and 4 tie; the smaller index comes first
        np.testing.assert_array_equal(select_observations(state, 3, True), [2, 4, 0])

    def test_saa1_scenario(self):
        """Observation first, historical means afterwards"""
        policy = SAA1Policy(self.instance, 3)
        scenario = policy.scenario(self.state)
        np.testing.assert_array_equal(scenario[:, 0], self.history.demand[:, -1])
        np.testing.assert_allclose(scenario[:, 1], self.history.demand.mean(axis=1))
        repeated = SAA1Policy(self.instance, 3, repeat=True).scenario(self.state)
        np.testing.assert_array_equal(repeated[:, 2], self.history.demand[:, -1])


class TestRollingPolicies(PolicyTestCase):
    """Mean, SAA-1 and SAA-3"""

    def test_mean_policy(self):
        """Anticipative decision on the mean scenario"""
        tour = MeanPolicy(self.instance, 3)(self.state)
        expected = anticipative_first_decision(self.instance, self.state, mean_demands(self.state, 3))
        self.assertEqual(tour, expected)
        self.assertTrue(is_feasible(self.instance, self.state, tour))

    def test_saa3_with_identical_scenarios_is_saa1(self):
        """Three copies of one observation give the SAA-1 decision"""
        history = self.history.demand.copy()
        history[:, -3:] = history[:, -1:]
        state = State(0, self.instance.I0, history)
        self.assertEqual(SAA3Policy(self.instance, 3)(state), SAA1Policy(self.instance, 3)(state))

    def test_saa3_minimises_average_value(self):
        """The chosen first-period subset has the smallest scenario average"""
        policy = SAA3Policy(self.instance, 3)
        scenarios = policy.scenarios(self.state)
        values = np.mean([first_period_values(self.instance, self.state, d) for d in scenarios], axis=0)
        tour = policy(self.state)
        self.assertEqual(values[tour.mask], values.min())
        self.assertTrue(is_feasible(self.instance, self.state, tour))

    def test_saa3_search_for_larger_instances(self):
        """Beyond the enumeration limit a first-period search is used"""
        policy = SAA3Policy(self.instance, 2, SolverConfig(saa3_enumeration_max_n=2))
        tour = policy(self.state)
        self.assertTrue(is_feasible(self.instance, self.state, tour))

    def test_policies_survive_a_rollout(self):
        """Every policy stays feasible over an episode"""
        episode = self.generator.sample_episode(self.instance, 4, seed=73)
        for policy in (MeanPolicy(self.instance, 2), SAA1Policy(self.instance, 2), SAA3Policy(self.instance, 2)):
            trajectory, total = rollout(self.instance, policy, episode, self.state)
            self.assertEqual(len(trajectory.steps), 4)
            self.assertGreater(total.total, 0.0)

    def test_functional_forms(self):
        """One-shot functions decide like the policy objects"""
        self.assertEqual(mean_policy(self.instance, self.state, 3), MeanPolicy(self.instance, 3)(self.state))
        self.assertEqual(saa1_policy(self.instance, self.state, 3), SAA1Policy(self.instance, 3)(self.state))
        self.assertEqual(saa1_policy(self.instance, self.state, 3, repeat=True),
                         SAA1Policy(self.instance, 3, repeat=True)(self.state))
        self.assertEqual(saa3_policy(self.instance, self.state, 3, seed=5),
                         SAA3Policy(self.instance, 3, seed=5)(self.state))


class TestMLCO(PolicyTestCase):
    """Prize model plus oracle"""

    def test_composition(self):
        """The policy is the oracle applied to the model's prizes"""
        config = QuantileConfig((0.25, 0.5, 0.75), 3)
        params = ModelParams.initial(config)
        policy = MLCOPolicy(self.instance, params, config)
        theta = prize_forward(self.state, self.instance, params, config)
        expected = solve(theta, self.instance.C - self.state.inventories, self.instance.B, self.instance.gamma)
        self.assertEqual(policy(self.state), expected)
        np.testing.assert_array_equal(policy.prizes(self.state), theta)

    def test_shape_check(self):
        """Parameters must fit the quantile configuration"""
        with self.assertRaises(RejectedInputError):
            MLCOPolicy(self.instance, ModelParams.initial(QuantileConfig((0.5,), 2)), QuantileConfig((0.5,), 3))

    def test_functional_form(self):
        """mlco_policy decides like MLCOPolicy"""
        config = QuantileConfig((0.25, 0.5, 0.75), 3)
        params = ModelParams.initial(config)
        self.assertEqual(mlco_policy(self.instance, self.state, params, config),
                         MLCOPolicy(self.instance, params, config)(self.state))


class TestAnticipative(PolicyTestCase):
    """Full-information baseline"""

    def setUp(self):
        super().setUp()
        self.instance = self.generator.generate_instance("normal", 3, "high", seed=81)
        self.history = self.generator.sample_history(self.instance, 20, seed=82)
        self.state = initial_state(self.instance, self.history)
        self.episode = self.generator.sample_episode(self.instance, 3, seed=83)

    def test_dominates_rolling_policies(self):
        """With exact solves no policy beats perfect information"""
        _, anticipative = anticipative_baseline(self.instance, self.episode, self.state)
        for policy in (MeanPolicy(self.instance, 2), SAA1Policy(self.instance, 2), SAA3Policy(self.instance, 2)):
            _, total = rollout(self.instance, policy, self.episode, self.state)
            self.assertLessEqual(anticipative, total.total + 1e-6)

    def test_trajectory_replays_schedule(self):
        """The trajectory has one step per period and matches the baseline total"""
        trajectory, total = anticipative_trajectory(self.instance, self.episode, self.state)
        tours, value = anticipative_baseline(self.instance, self.episode, self.state)
        self.assertEqual(trajectory.tours(), tours)
        self.assertEqual(total.total, value)


class TestPolicySpec(PolicyTestCase):
    """Policy construction"""

    def test_validation(self):
        """Unknown tags, missing parameters and wrong scenario counts"""
        with self.assertRaises(RejectedInputError):
            PolicySpec("oracle")
        with self.assertRaises(RejectedInputError):
            PolicySpec("mlco")
        with self.assertRaises(RejectedInputError):
            PolicySpec("saa3", scenario_count=5)

    def test_build_policy(self):
        """Tags map to policy objects; the anticipative baseline is not a rolling policy"""
        self.assertIsInstance(build_policy(PolicySpec("mean", 2), self.instance), MeanPolicy)
        saa1 = build_policy(PolicySpec("saa1", 2), self.instance, saa1_repeat=True)
        self.assertTrue(saa1.repeat)
        config = QuantileConfig(horizon=2)
        mlco = build_policy(PolicySpec("mlco", 2, ModelParams.initial(config)), self.instance, quantiles=config)
        self.assertIsInstance(mlco, MLCOPolicy)
        with self.assertRaises(RejectedInputError):
            build_policy(PolicySpec("anticipative", 2), self.instance)


if __name__ == '__main__':
    unittest.main(verbosity=2)
