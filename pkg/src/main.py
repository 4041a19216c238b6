# src/main.py
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import psutil
from tqdm import tqdm

from baseline_policies import PolicySpec, anticipative_trajectory, build_policy
from config import ExperimentConfig
from errors import DSIRPError, RejectedInputError, SchemaError
from imitation_learning import EpochRecord, ImitationTrainer, TrainingSample, build_dataset_baty
from instance_generator import (PATTERNS, Episode, InstanceGenerator, derive_seed, instance_batch_seeds,
                                load_episode, load_instance, save_episode, save_instance)
from inventory_mdp import initial_state, relative_gap, rollout
from memory_system import ExperimentMemory
from prize_model import QuantileConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
VALIDATION_EPISODES = 5
INVENTORY_BINS = 10
# feature columns appended to every stored episode so look-aheads up to this length are served
MAX_LOOKAHEAD = 6


def _paths(out: Path, instance_id: str, validation: int, evaluation: int) -> Dict[str, Any]:
    return {
        "instance": out / "instances" / f"{instance_id}.json",
        "history": out / "histories" / f"{instance_id}.json",
        "validation": [out / "validation" / f"{instance_id}_v{j}.json" for j in range(validation)],
        "evaluation": [out / "evaluation" / f"{instance_id}_e{k}.json" for k in range(evaluation)],
    }


def checkpoint_dir(out: Path, instance_id: str, paradigm: str, lookahead: int) -> Path:
    return out / "checkpoints" / instance_id / f"{paradigm}_H{lookahead}"


def truncate_episode(episode: Episode, T: int) -> Episode:
    if T > episode.T:
        raise RejectedInputError(f"episode has {episode.T} periods, {T} requested")
    return Episode(T, episode.demand[:, :T], episode.context)


def memory_usage_mb() -> float:
    return psutil.Process(os.getpid()).memory_info().rss / (1024 * 1024)


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    """Per-episode rows plus per-instance and per-(pattern, penalty, policy) aggregates"""
    episodes: pd.DataFrame
    instances: pd.DataFrame
    summary: pd.DataFrame

    EPISODE_COLUMNS = ["pattern", "penalty", "instance_id", "episode", "policy",
                       "policy_cost", "anticipative_cost", "relative_gap"]

    @classmethod
    def from_rows(cls, rows: Iterable[Dict[str, Any]]) -> "EvalReport":
        episodes = pd.DataFrame(list(rows), columns=cls.EPISODE_COLUMNS)
        episodes = episodes.sort_values(["pattern", "penalty", "instance_id", "policy", "episode"],
                                        kind="mergesort").reset_index(drop=True)
        instances = summarise_episodes(episodes)
        return cls(episodes, instances, summarise_instances(instances))

    def write(self, directory: Path) -> Dict[str, Path]:
        directory.mkdir(parents=True, exist_ok=True)
        files = {
            "episodes": directory / "evaluation_episodes.csv",
            "instances": directory / "evaluation_instances.csv",
            "summary": directory / "evaluation_summary.csv",
        }
        self.episodes.to_csv(files["episodes"], index=False)
        self.instances.to_csv(files["instances"], index=False)
        self.summary.to_csv(files["summary"], index=False)
        return files

    @classmethod
    def load(cls, directory: Path) -> "EvalReport":
        """Read the three CSVs and check that the aggregates recompute exactly"""
        episodes = pd.read_csv(directory / "evaluation_episodes.csv")
        instances = pd.read_csv(directory / "evaluation_instances.csv")
        summary = pd.read_csv(directory / "evaluation_summary.csv")
        report = cls.from_rows(episodes.to_dict("records"))
        for name, stored in (("instances", instances), ("summary", summary)):
            recomputed = getattr(report, name)
            if not np.allclose(stored.select_dtypes("number").to_numpy(),
                               recomputed.select_dtypes("number").to_numpy(), rtol=0, atol=1e-12, equal_nan=True):
                raise SchemaError("aggregates do not match the per-episode rows", f"evaluation_{name}.csv")
        return report


def summarise_episodes(episodes: pd.DataFrame) -> pd.DataFrame:
    keys = ["pattern", "penalty", "instance_id", "policy"]
    if episodes.empty:
        return pd.DataFrame(columns=keys + ["episodes", "mean_gap"])
    grouped = episodes.groupby(keys, sort=True)["relative_gap"]
    return grouped.agg(episodes="count", mean_gap="mean").reset_index()


def summarise_instances(instances: pd.DataFrame) -> pd.DataFrame:
    keys = ["pattern", "penalty", "policy"]
    if instances.empty:
        return pd.DataFrame(columns=keys + ["instances", "mean_gap", "std_gap"])
    grouped = instances.groupby(keys, sort=True)["mean_gap"]
    summary = grouped.agg(instances="count", mean_gap="mean",
                          std_gap=lambda gaps: float(np.std(gaps.to_numpy(), ddof=0))).reset_index()
    return summary


def end_of_horizon_profile(samples: List[Tuple[str, TrainingSample]],
                           capacities: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Mean visited count and delivered quantity per position in the anticipative trajectory"""
    rows = []
    for instance_id, sample in samples:
        C = capacities[instance_id]
        visits = len(sample.target_tour)
        delivered = float(sum(C[i - 1] - sample.state.inventories[i - 1] for i in sample.target_tour.sequence))
        rows.append({"relative_period": sample.lookahead_index, "visited": visits, "delivered": delivered})
    return _profile(pd.DataFrame(rows, columns=["relative_period", "visited", "delivered"]))


def trajectory_profile(frames: List[pd.DataFrame]) -> pd.DataFrame:
    rows = []
    for frame in frames:
        for record in frame.itertuples(index=False):
            rows.append({"relative_period": int(record.period),
                         "visited": bin(int(record.customer_visits)).count("1"),
                         "delivered": float(record.delivered_units_total)})
    return _profile(pd.DataFrame(rows, columns=["relative_period", "visited", "delivered"]))


def _profile(frame: pd.DataFrame) -> pd.DataFrame:
    columns = ["relative_period", "samples", "mean_visited", "mean_delivered"]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby("relative_period", sort=True)
    profile = grouped.agg(samples=("visited", "count"), mean_visited=("visited", "mean"),
                          mean_delivered=("delivered", "mean")).reset_index()
    return profile[columns]


def explored_inventories(dataset: List[TrainingSample], capacity: np.ndarray) -> np.ndarray:
    """Histogram (fractions) of I/C over every customer of every dataset state"""
    if not dataset:
        return np.zeros(INVENTORY_BINS)
    ratios = np.concatenate([s.state.inventories / capacity for s in dataset])
    counts, _ = np.histogram(np.clip(ratios, 0.0, 1.0), bins=INVENTORY_BINS, range=(0.0, 1.0))
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# process-pool workers (module level so they pickle)

def _train_worker(job: Dict[str, Any]) -> Dict[str, Any]:
    config = ExperimentConfig.from_dict(job["config"])
    instance = load_instance(job["paths"]["instance"])
    history = load_episode(job["paths"]["history"])
    validation = [load_episode(p) for p in job["paths"]["validation"]]
    train = replace(config.train, seed=job["seed"])
    qconfig = QuantileConfig(train.quantiles, train.lookahead)
    target = Path(job["checkpoint_dir"])

    def save_epoch(record: EpochRecord, params):
        save_checkpoint(params, qconfig, target / f"epoch_{record.epoch:03d}.json")

    trainer = ImitationTrainer(instance, history, validation, train, config.solver,
                               state_path=target / "trainer_state.pkl", progress=job["progress"],
                               on_epoch=save_epoch)
    result = trainer.train()
    save_checkpoint(result.params, qconfig, target / "best.json")
    return {
        "instance_id": instance.id,
        "records": [asdict(r) for r in result.records],
        "best_validation_cost": result.best_validation_cost,
        "explored": explored_inventories(result.dataset, instance.C).tolist(),
    }


def _evaluate_worker(job: Dict[str, Any]) -> Dict[str, Any]:
    config = ExperimentConfig.from_dict(job["config"])
    instance = load_instance(job["paths"]["instance"])
    history = load_episode(job["paths"]["history"])
    H = config.train.lookahead
    params, qconfig = None, None
    if job["checkpoint"] is not None:
        params, qconfig = load_checkpoint(job["checkpoint"])
    trajectories = Path(job["trajectories"])
    rows, latencies = [], {}
    for k, path in enumerate(job["paths"]["evaluation"]):
        episode = truncate_episode(load_episode(path), config.T_eval)
        x0 = initial_state(instance, history, episode, H)
        seed = derive_seed(job["seed"], k)
        trajectory, baseline = anticipative_trajectory(instance, episode, x0, config.solver, seed=seed)
        trajectory.export_csv(trajectories / instance.id / f"anticipative_e{k}.csv")
        for tag in config.policies:
            if tag == "anticipative":
                cost = baseline.total
            else:
                policy = build_policy(PolicySpec(tag, H, params), instance, config.solver, qconfig,
                                      config.saa1_repeat, seed=seed)
                steps, total = rollout(instance, policy, episode, x0)
                steps.export_csv(trajectories / instance.id / f"{tag}_e{k}.csv")
                latencies.setdefault(tag, []).extend(s.decision_seconds for s in steps.steps)
                cost = total.total
            rows.append({"pattern": job["pattern"], "penalty": job["penalty"], "instance_id": instance.id,
                         "episode": k, "policy": tag, "policy_cost": cost, "anticipative_cost": baseline.total,
                         "relative_gap": relative_gap(cost, baseline.total)})
    return {"instance_id": instance.id, "rows": rows, "latencies": latencies}


# ---------------------------------------------------------------------------

class ExperimentSystem:
    """Drives instance generation, training, evaluation and reporting for one output directory"""

    def __init__(self, config: Optional[ExperimentConfig] = None):
        self.config = config or ExperimentConfig()
        logging.basicConfig(level=getattr(logging, self.config.log_level.upper(), logging.INFO),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        self.generator = InstanceGenerator()
        self._memory: Optional[ExperimentMemory] = None
        print("🚀 DSIRP experiment system initialised")

    @property
    def out(self) -> Path:
        return self.config.output_dir

    @property
    def memory(self) -> ExperimentMemory:
        if self._memory is None:
            self._memory = ExperimentMemory(self.config.ledger_path)
        return self._memory

    # -- plumbing ------------------------------------------------------------
    def _run(self, command: str, body: Callable[[Dict[str, float]], Dict[str, Any]]) -> Dict[str, Any]:
        start_time = datetime.now()
        run_id = None
        component_times: Dict[str, float] = {}
        try:
            if command != "generate":
                run_id = self.memory.log_run_start(command, self.config.to_dict())
            result = body(component_times)
            if run_id is None:
                run_id = self.memory.log_run_start(command, self.config.to_dict())
            self.memory.log_run_end(run_id, "success")
            total_time = (datetime.now() - start_time).total_seconds()
            response = {
                'success': True,
                'command': command,
                'performance_metrics': {
                    'total_processing_time': total_time,
                    'component_times': component_times,
                    'memory_rss_mb': memory_usage_mb(),
                },
                'timestamp': datetime.now().isoformat(),
            }
            response.update(result)
            return response
        except (DSIRPError, OSError) as e:
            if run_id is not None:
                self.memory.log_run_end(run_id, "failed")
            logger.error("%s failed: %s", command, e)
            error_details = {
                'error': str(e),
                'type': type(e).__name__,
                'traceback': traceback.format_exc(),
                'timestamp': datetime.now().isoformat(),
            }
            return self._create_error_response(f"{command} failed: {e}", start_time, error_details)

    def _create_error_response(self, error_message: str, start_time: datetime,
                               error_details: Dict[str, Any] = None) -> Dict[str, Any]:
        total_time = (datetime.now() - start_time).total_seconds()
        response = {
            'success': False,
            'error': error_message,
            'performance_metrics': {
                'total_processing_time': total_time,
                'memory_rss_mb': memory_usage_mb(),
                'error_occurred': True,
            },
            'timestamp': datetime.now().isoformat(),
        }
        if error_details:
            response['error_details'] = error_details
        return response

    def _map(self, worker: Callable, jobs: List[Dict[str, Any]], desc: str) -> List[Dict[str, Any]]:
        if self.config.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.config.jobs) as pool:
                return list(tqdm(pool.map(worker, jobs), total=len(jobs), desc=desc,
                                 disable=not self.config.progress))
        return [worker(job) for job in tqdm(jobs, desc=desc, disable=not self.config.progress)]

    def load_manifest(self) -> Dict[str, Any]:
        path = self.out / MANIFEST
        if not path.exists():
            raise RejectedInputError(f"no manifest at {path}; run 'generate' first")
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON ({e.msg})", str(path)) from e

    def selected_entries(self) -> List[Dict[str, Any]]:
        """Manifest entries matching the configured patterns and penalties; all files must exist"""
        manifest = self.load_manifest()
        entries = [e for e in manifest["instances"]
                   if e["pattern"] in self.config.patterns and e["penalty"] in self.config.penalties]
        missing = []
        for entry in entries:
            paths = _paths(self.out, entry["id"], VALIDATION_EPISODES, len(entry["evaluation_seeds"]))
            for path in [paths["instance"], paths["history"], *paths["validation"], *paths["evaluation"]]:
                if not path.exists():
                    missing.append(str(path))
        if missing:
            raise RejectedInputError("missing instance files: " + ", ".join(missing))
        return entries

    # -- commands ------------------------------------------------------------
    def cmd_generate(self) -> Dict[str, Any]:
        cfg = self.config
        if self.out.exists() and any(self.out.iterdir()) and not cfg.force:
            return self._create_error_response(
                f"output directory {self.out} is not empty; pass --force to overwrite", datetime.now())

        def body(times: Dict[str, float]) -> Dict[str, Any]:
            started = datetime.now()
            padding = max(cfg.train.lookahead, MAX_LOOKAHEAD) - 1
            entries = []
            for p_index, pattern in enumerate(PATTERNS):
                if pattern not in cfg.patterns:
                    continue
                for k in range(cfg.instances_per_pattern):
                    seeds = instance_batch_seeds(cfg.seed, p_index, k, VALIDATION_EPISODES, cfg.eval_episodes)
                    for penalty in cfg.penalties:
                        instance = self.generator.generate_instance(pattern, cfg.n, penalty, seeds.instance)
                        paths = _paths(self.out, instance.id, VALIDATION_EPISODES, cfg.eval_episodes)
                        save_instance(instance, paths["instance"])
                        save_episode(self.generator.sample_history(instance, cfg.history_length, seeds.history),
                                     paths["history"])
                        for seed, path in zip(seeds.validation, paths["validation"]):
                            save_episode(self.generator.sample_episode(instance, cfg.T_eval, seed, padding), path)
                        for seed, path in zip(seeds.evaluation, paths["evaluation"]):
                            save_episode(self.generator.sample_episode(instance, cfg.T_eval, seed, padding), path)
                        entries.append({"id": instance.id, "pattern": pattern, "penalty": penalty,
                                        "seed": seeds.instance,
                                        "history_seed": seeds.history, "validation_seeds": list(seeds.validation),
                                        "evaluation_seeds": list(seeds.evaluation)})
            manifest = {"config": cfg.experiment_dict(), "context_padding": padding, "instances": entries}
            (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
            times['generation'] = (datetime.now() - started).total_seconds()
            print(f"✅ Generated {len(entries)} instances in {self.out}")
            return {'instances': len(entries), 'manifest': str(self.out / MANIFEST),
                    'generation_stats': self.generator.get_generation_stats()}

        return self._run("generate", body)

    def cmd_train(self) -> Dict[str, Any]:
        cfg = self.config

        def body(times: Dict[str, float]) -> Dict[str, Any]:
            started = datetime.now()
            entries = self.selected_entries()
            jobs = []
            for entry in entries:
                paths = _paths(self.out, entry["id"], VALIDATION_EPISODES, len(entry["evaluation_seeds"]))
                jobs.append({
                    "config": cfg.to_dict(),
                    "paths": {k: [str(p) for p in v] if isinstance(v, list) else str(v) for k, v in paths.items()},
                    "seed": derive_seed(cfg.train.seed, entry["seed"]),
                    "checkpoint_dir": str(checkpoint_dir(self.out, entry["id"], cfg.train.paradigm,
                                                         cfg.train.lookahead)),
                    "progress": cfg.progress and cfg.jobs == 1,
                })
            print(f"🚀 Training {cfg.train.paradigm} (H={cfg.train.lookahead}) on {len(jobs)} instances")
            results = self._map(_train_worker, jobs, "train")
            times['training'] = (datetime.now() - started).total_seconds()

            explored_rows = []
            for result in results:
                for record in result["records"]:
                    self.memory.log_training_epoch(result["instance_id"], cfg.train.paradigm,
                                                   cfg.train.lookahead, EpochRecord(**record))
                for b, fraction in enumerate(result["explored"]):
                    explored_rows.append({"instance_id": result["instance_id"], "paradigm": cfg.train.paradigm,
                                          "lookahead": cfg.train.lookahead, "bin_low": b / INVENTORY_BINS,
                                          "bin_high": (b + 1) / INVENTORY_BINS, "fraction": fraction})
            logs = self.out / "logs"
            self.memory.export_training_log_csv(logs / "training_log.csv")
            self.memory.export_training_timing_csv(logs / "training_timing.csv")
            reports = self.out / "reports"
            reports.mkdir(parents=True, exist_ok=True)
            explored_path = reports / f"explored_inventories_{cfg.train.paradigm}_H{cfg.train.lookahead}.csv"
            pd.DataFrame(explored_rows, columns=["instance_id", "paradigm", "lookahead", "bin_low", "bin_high",
                                                 "fraction"]).to_csv(explored_path, index=False)
            print(f"📊 Training log written to {logs / 'training_log.csv'}")
            return {'trained_instances': len(results),
                    'best_validation_costs': {r["instance_id"]: r["best_validation_cost"] for r in results}}

        return self._run("train", body)

    def cmd_evaluate(self) -> Dict[str, Any]:
        cfg = self.config

        def body(times: Dict[str, float]) -> Dict[str, Any]:
            started = datetime.now()
            entries = self.selected_entries()
            jobs = []
            missing = []
            for entry in entries:
                paths = _paths(self.out, entry["id"], VALIDATION_EPISODES, len(entry["evaluation_seeds"]))
                checkpoint = None
                if "mlco" in cfg.policies:
                    checkpoint = checkpoint_dir(self.out, entry["id"], cfg.train.paradigm,
                                                cfg.train.lookahead) / "best.json"
                    if not checkpoint.exists():
                        missing.append(str(checkpoint))
                jobs.append({
                    "config": cfg.to_dict(), "pattern": entry["pattern"], "penalty": entry["penalty"],
                    "paths": {k: [str(p) for p in v] if isinstance(v, list) else str(v) for k, v in paths.items()},
                    "checkpoint": None if checkpoint is None else str(checkpoint),
                    "seed": derive_seed(cfg.seed, entry["seed"], 5),
                    "trajectories": str(self.out / "reports" / "trajectories"),
                })
            if missing:
                raise RejectedInputError("missing mlco checkpoints: " + ", ".join(missing))
            print(f"🚀 Evaluating {', '.join(cfg.policies)} on {len(jobs)} instances")
            results = self._map(_evaluate_worker, jobs, "evaluate")
            times['evaluation'] = (datetime.now() - started).total_seconds()

            report = EvalReport.from_rows(row for result in results for row in result["rows"])
            files = report.write(self.out / "reports")
            for result in results:
                for policy, seconds in result["latencies"].items():
                    self.memory.record_decision_latency(policy, result["instance_id"], seconds)
            latency = self.memory.get_latency_summary()
            timing = pd.DataFrame([{"policy": p, **stats} for p, stats in sorted(latency.items())],
                                  columns=["policy", "decisions", "median_seconds", "mean_seconds"])
            timing.to_csv(self.out / "reports" / "inference_time.csv", index=False)
            print(f"📊 Evaluation summary written to {files['summary']}")
            return {'summary': report.summary.to_dict("records"), 'inference_time': latency,
                    'files': {k: str(v) for k, v in files.items()}}

        return self._run("evaluate", body)

    def cmd_eoh_report(self) -> Dict[str, Any]:
        cfg = self.config

        def body(times: Dict[str, float]) -> Dict[str, Any]:
            started = datetime.now()
            if cfg.eoh_source == "trajectories":
                root = self.out / "reports" / "trajectories"
                files = sorted(root.glob("*/*.csv")) if root.exists() else []
                profile = trajectory_profile([pd.read_csv(f) for f in files])
            else:
                samples, capacities = [], {}
                for entry in self.selected_entries():
                    paths = _paths(self.out, entry["id"], VALIDATION_EPISODES, len(entry["evaluation_seeds"]))
                    instance = load_instance(paths["instance"])
                    history = load_episode(paths["history"])
                    train = replace(cfg.train, seed=derive_seed(cfg.train.seed, entry["seed"]))
                    capacities[instance.id] = instance.C
                    dataset = build_dataset_baty(instance, history, train, cfg.solver)
                    samples.extend((instance.id, s) for s in dataset)
                profile = end_of_horizon_profile(samples, capacities)
            profile.insert(0, "source", cfg.eoh_source)
            path = self.out / "reports" / f"eoh_{cfg.eoh_source}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            profile.to_csv(path, index=False)
            times['report'] = (datetime.now() - started).total_seconds()
            print(f"📊 End-of-horizon profile written to {path}")
            return {'rows': len(profile), 'file': str(path)}

        return self._run("eoh-report", body)

    def get_system_analytics(self) -> Dict[str, Any]:
        return self.memory.get_run_insights()
