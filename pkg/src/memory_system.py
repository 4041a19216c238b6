# src/memory_system.py
import json
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

TRAINING_COLUMNS = ["instance_id", "paradigm", "lookahead", "epoch", "dataset_size",
                    "train_fy_loss", "validation_cost", "alpha"]
TIMING_COLUMNS = ["instance_id", "paradigm", "lookahead", "epoch", "wallclock",
                  "sample_generation_s", "policy_update_s", "other_s"]


class ExperimentMemory:
    """SQLite ledger of runs, training epochs and per-policy decision latency"""

    def __init__(self, db_path: Union[str, Path] = "dsirp_ledger.db"):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._init_database()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _init_database(self):
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT,
                config_json TEXT,
                started TEXT,
                finished TEXT,
                status TEXT DEFAULT 'running'
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS training_log (
                instance_id TEXT,
                paradigm TEXT,
                lookahead INTEGER,
                epoch INTEGER,
                dataset_size INTEGER,
                train_fy_loss REAL,
                validation_cost REAL,
                alpha REAL,
                wallclock REAL,
                sample_generation_s REAL,
                policy_update_s REAL,
                other_s REAL,
                PRIMARY KEY (instance_id, paradigm, lookahead, epoch)
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS policy_performance (
                policy TEXT,
                instance_id TEXT,
                decisions INTEGER DEFAULT 0,
                total_seconds REAL DEFAULT 0,
                avg_seconds REAL DEFAULT 0,
                last_updated TEXT,
                PRIMARY KEY (policy, instance_id)
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS decision_latency (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                policy TEXT,
                instance_id TEXT,
                seconds REAL
            )
        ''')

        conn.commit()
        conn.close()

    # -- runs --------------------------------------------------------------
    def log_run_start(self, command: str, config: Dict[str, Any]) -> int:
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute('INSERT INTO runs (command, config_json, started) VALUES (?, ?, ?)',
                       (command, json.dumps(config, sort_keys=True), datetime.now().isoformat()))
        run_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def log_run_end(self, run_id: int, status: str = "success"):
        conn = self._connect()
        conn.execute('UPDATE runs SET finished = ?, status = ? WHERE id = ?',
                     (datetime.now().isoformat(), status, run_id))
        conn.commit()
        conn.close()

    # -- training ----------------------------------------------------------
    def log_training_epoch(self, instance_id: str, paradigm: str, lookahead: int, record: Any):
        """Store one EpochRecord; re-logging an epoch (after a resume) replaces it"""
        conn = self._connect()
        conn.execute('''
            INSERT OR REPLACE INTO training_log
            (instance_id, paradigm, lookahead, epoch, dataset_size, train_fy_loss, validation_cost,
             alpha, wallclock, sample_generation_s, policy_update_s, other_s)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (instance_id, paradigm, lookahead, record.epoch, record.dataset_size, record.train_fy_loss,
              record.validation_cost, record.alpha, record.wallclock, record.sample_generation_s,
              record.policy_update_s, record.other_s))
        conn.commit()
        conn.close()

    def last_logged_epoch(self, instance_id: str, paradigm: str, lookahead: int) -> Optional[int]:
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute('SELECT MAX(epoch) FROM training_log WHERE instance_id = ? AND paradigm = ? AND lookahead = ?',
                       (instance_id, paradigm, lookahead))
        result = cursor.fetchone()[0]
        conn.close()
        return result

    def _training_frame(self, columns: List[str]) -> pd.DataFrame:
        conn = self._connect()
        frame = pd.read_sql_query(
            f"SELECT {', '.join(columns)} FROM training_log ORDER BY instance_id, paradigm, lookahead, epoch", conn)
        conn.close()
        return frame

    def export_training_log_csv(self, path: Union[str, Path]) -> Path:
        """Deterministic columns only; identical across reruns with the same seeds"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._training_frame(TRAINING_COLUMNS).to_csv(path, index=False)
        return path

    def export_training_timing_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._training_frame(TIMING_COLUMNS).to_csv(path, index=False)
        return path

    # -- latency -----------------------------------------------------------
    def record_decision_latency(self, policy: str, instance_id: str, seconds: Sequence[float]):
        """Append raw samples and fold them into the running average"""
        seconds = [float(s) for s in seconds]
        if not seconds:
            return
        conn = self._connect()
        cursor = conn.cursor()
        cursor.executemany('INSERT INTO decision_latency (policy, instance_id, seconds) VALUES (?, ?, ?)',
                           [(policy, instance_id, s) for s in seconds])
        cursor.execute('SELECT decisions, total_seconds FROM policy_performance WHERE policy = ? AND instance_id = ?',
                       (policy, instance_id))
        result = cursor.fetchone()
        current_time = datetime.now().isoformat()
        if result:
            decisions, total = result
            decisions += len(seconds)
            total += sum(seconds)
            cursor.execute('''
                UPDATE policy_performance SET decisions = ?, total_seconds = ?, avg_seconds = ?, last_updated = ?
                WHERE policy = ? AND instance_id = ?
            ''', (decisions, total, total / decisions, current_time, policy, instance_id))
        else:
            cursor.execute('''
                INSERT INTO policy_performance
                    (policy, instance_id, decisions, total_seconds, avg_seconds, last_updated)
                VALUES (?, ?, ?, ?, ?, ?)
            ''', (policy, instance_id, len(seconds), sum(seconds), sum(seconds) / len(seconds), current_time))
        conn.commit()
        conn.close()

    def get_latency_summary(self) -> Dict[str, Dict[str, float]]:
        """Median and mean seconds per decision for every policy"""
        conn = self._connect()
        frame = pd.read_sql_query('SELECT policy, seconds FROM decision_latency', conn)
        conn.close()
        summary = {}
        for policy, group in frame.groupby("policy"):
            summary[policy] = {
                "decisions": int(len(group)),
                "median_seconds": float(np.median(group["seconds"])),
                "mean_seconds": float(group["seconds"].mean()),
            }
        return summary

    # -- insights ----------------------------------------------------------
    def get_run_insights(self) -> Dict[str, Any]:
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute('SELECT COUNT(*) FROM runs')
        total_runs = cursor.fetchone()[0] or 0
        cursor.execute("SELECT command, COUNT(*) FROM runs WHERE status = 'failed' GROUP BY command")
        failures = {row[0]: row[1] for row in cursor.fetchall()}
        cursor.execute('SELECT COUNT(DISTINCT instance_id || paradigm || lookahead), COUNT(*) FROM training_log')
        trained, epochs = cursor.fetchone()
        conn.close()

        latency = self.get_latency_summary()
        slowest = max(latency, key=lambda p: latency[p]["median_seconds"]) if latency else None
        return {
            "total_runs": total_runs,
            "failed_runs": failures,
            "training_runs": trained or 0,
            "logged_epochs": epochs or 0,
            "latency": latency,
            "slowest_policy": slowest,
            "recommendations": self.get_recommendations(failures, latency),
        }

    def get_recommendations(self, failures: Optional[Dict[str, int]] = None,
                            latency: Optional[Dict[str, Dict[str, float]]] = None) -> List[str]:
        recommendations = []
        for command, count in (failures or {}).items():
            recommendations.append(f"Inspect the logs of {count} failed '{command}' run(s)")
        for policy, stats in (latency or {}).items():
            if stats["median_seconds"] > 1.0:
                recommendations.append(f"{policy} needs {stats['median_seconds']:.2f}s per decision; "
                                       "consider a smaller solver budget")
        if latency and "mlco" in latency:
            slower = [p for p, s in latency.items()
                      if p != "mlco" and s["median_seconds"] < 10 * latency["mlco"]["median_seconds"]]
            for policy in slower:
                recommendations.append(f"mlco is less than 10x faster than {policy}")
        return recommendations[:5]
