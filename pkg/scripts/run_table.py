"""Run the Monte-Carlo sweep on trained artifacts and print the results table.

    python scripts/run_table.py --config configs/desk.json [--realizations 1000]

Missing artifacts are trained first; --retrain forces a fresh training run.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from progtx import cli
from progtx.simulator import (RANKING_FILE, STACK_FILE, run_experiment, table_csv,
                              write_outputs)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--manifest")
    p.add_argument("--realizations", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--retrain", action="store_true")
    args = p.parse_args(argv)

    cfg = cli.load_config(args.config)
    if args.manifest:
        cfg["manifest"] = args.manifest
    if args.jobs:
        cfg["jobs"] = args.jobs
    cli._apply_flags(cfg, argparse.Namespace())
    root = Path(cfg["artifacts"])
    if args.retrain or not (root / RANKING_FILE).exists():
        cli.cmd_rank_channels(cfg)
    if args.retrain or not (root / STACK_FILE).exists():
        cli.cmd_train_codebooks(cfg)

    config = cli.experiment_config(cfg)
    if args.realizations:
        config = replace(config, n_realizations=args.realizations)
    result = run_experiment(config)
    for path in write_outputs(config, result):
        print(f"wrote {path}", file=sys.stderr)
    sys.stdout.write(table_csv(result.table))
    return 0


if __name__ == "__main__":
    sys.exit(main())
