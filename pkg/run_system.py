# run_system.py
#!/usr/bin/env python3
"""
Command-line entry point for the DSIRP experiment system

    python run_system.py generate --pattern normal bimodal --out runs/demo
    python run_system.py train --paradigm voting_dagger --voting 5 --out runs/demo
    python run_system.py evaluate --policies mean saa1 mlco --out runs/demo
    python run_system.py eoh-report --source trajectories --out runs/demo
"""

import argparse
import json
import os
import sys

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from config import PARADIGMS, POLICIES, ExperimentConfig
from errors import DSIRPError
from main import ExperimentSystem

COMMANDS = ("generate", "train", "evaluate", "eoh-report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Learning policies for the dynamic and stochastic IRP")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    parser.add_argument("--pattern", dest="patterns", nargs="+", help="demand patterns to include")
    parser.add_argument("--instances", dest="instances_per_pattern", type=int, help="instances per pattern")
    parser.add_argument("--n", type=int, help="customers per instance")
    parser.add_argument("--penalty", dest="penalties", nargs="+", choices=("low", "high"))
    parser.add_argument("--horizon", dest="T_eval", type=int, help="evaluation periods")
    parser.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    parser.add_argument("--lookahead", type=int, help="look-ahead periods of policies and prize model")
    parser.add_argument("--paradigm", choices=PARADIGMS)
    parser.add_argument("--voting", type=int, help="scenarios per state for voting_dagger")
    parser.add_argument("--quantiles", nargs="+", type=float, help="quantile levels of the prize model")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--policies", nargs="+", choices=POLICIES)
    parser.add_argument("--saa1-repeat", dest="saa1_repeat", action="store_true", default=None,
                        help="repeat the SAA-1 observation over the whole look-ahead")
    parser.add_argument("--source", dest="eoh_source", choices=("dataset", "trajectories"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int, help="parallel worker processes (instance level)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--force", action="store_true", default=None)
    parser.add_argument("--log-level", dest="log_level")
    parser.add_argument("--no-progress", dest="progress", action="store_false", default=None)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return config.with_overrides(**flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    print("🚀 DSIRP Experiment System")
    print("=" * 50)
    try:
        config = load_config(args)
    except (DSIRPError, OSError) as e:
        print(f"❌ Invalid configuration: {e}")
        return 2

    system = ExperimentSystem(config)
    handlers = {
        "generate": system.cmd_generate,
        "train": system.cmd_train,
        "evaluate": system.cmd_evaluate,
        "eoh-report": system.cmd_eoh_report,
    }
    result = handlers[args.command]()
    if result['success']:
        print(f"✅ {args.command} finished in {result['performance_metrics']['total_processing_time']:.2f}s")
        return 0
    print(f"❌ {result.get('error', 'Unknown error')}")
    details = result.get('error_details')
    if details:
        print(json.dumps({k: details[k] for k in ('type', 'error')}, indent=2))
    return 1


if __name__ == "__main__":
    sys.exit(main())
