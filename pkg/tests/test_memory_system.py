# tests/test_memory_system.py
import os
import shutil
import sys
import tempfile
import unittest

import pandas as pd

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from imitation_learning import EpochRecord
from memory_system import TIMING_COLUMNS, TRAINING_COLUMNS, ExperimentMemory


def record(epoch: int, cost: float) -> EpochRecord:
    return EpochRecord(epoch=epoch, dataset_size=10 * (epoch + 1), train_fy_loss=1.0 / (epoch + 1),
                       validation_cost=cost, alpha=1.0, wallclock=0.5, sample_generation_s=0.2,
                       policy_update_s=0.2, other_s=0.1)


class TestExperimentMemory(unittest.TestCase):
    """SQLite ledger"""

    def setUp(self):
        self.out = tempfile.mkdtemp()
        self.memory = ExperimentMemory(os.path.join(self.out, "logs", "ledger.db"))

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_runs(self):
        """Run start and end are recorded, failures are counted"""
        ok = self.memory.log_run_start("generate", {"n": 4})
        self.memory.log_run_end(ok, "success")
        failed = self.memory.log_run_start("train", {"n": 4})
        self.memory.log_run_end(failed, "failed")
        insights = self.memory.get_run_insights()
        self.assertEqual(insights["total_runs"], 2)
        self.assertEqual(insights["failed_runs"], {"train": 1})
        self.assertTrue(any("train" in r for r in insights["recommendations"]))

    def test_training_log(self):
        """Epochs are keyed by instance, paradigm and look-ahead; re-logging replaces"""
        self.memory.log_training_epoch("a", "baty", 6, record(0, 100.0))
        self.memory.log_training_epoch("a", "baty", 6, record(1, 90.0))
        self.memory.log_training_epoch("a", "baty", 6, record(1, 80.0))
        self.memory.log_training_epoch("a", "sampling", 6, record(0, 95.0))
        self.assertEqual(self.memory.last_logged_epoch("a", "baty", 6), 1)
        self.assertIsNone(self.memory.last_logged_epoch("b", "baty", 6))

        path = self.memory.export_training_log_csv(os.path.join(self.out, "training_log.csv"))
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), TRAINING_COLUMNS)
        self.assertEqual(len(frame), 3)
        baty = frame[frame["paradigm"] == "baty"]
        self.assertEqual(list(baty["validation_cost"]), [100.0, 80.0])

        timing = pd.read_csv(self.memory.export_training_timing_csv(os.path.join(self.out, "timing.csv")))
        self.assertEqual(list(timing.columns), TIMING_COLUMNS)

    def test_latency(self):
        """Median and mean seconds per decision"""
        self.memory.record_decision_latency("mlco", "a", [0.01, 0.03, 0.02])
        self.memory.record_decision_latency("mlco", "b", [0.04])
        self.memory.record_decision_latency("saa3", "a", [2.0, 4.0])
        self.memory.record_decision_latency("mean", "a", [])
        summary = self.memory.get_latency_summary()
        self.assertEqual(set(summary), {"mlco", "saa3"})
        self.assertEqual(summary["mlco"]["decisions"], 4)
        self.assertAlmostEqual(summary["mlco"]["median_seconds"], 0.025)
        self.assertAlmostEqual(summary["saa3"]["mean_seconds"], 3.0)

        insights = self.memory.get_run_insights()
        self.assertEqual(insights["slowest_policy"], "saa3")
        self.assertTrue(any("saa3" in r for r in insights["recommendations"]))

    def test_empty_ledger(self):
        """A fresh ledger reports nothing"""
        insights = self.memory.get_run_insights()
        self.assertEqual(insights["total_runs"], 0)
        self.assertEqual(insights["logged_epochs"], 0)
        self.assertIsNone(insights["slowest_policy"])
        self.assertEqual(insights["recommendations"], [])


if __name__ == '__main__':
    unittest.main(verbosity=2)
