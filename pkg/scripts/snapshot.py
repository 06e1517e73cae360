"""Per-slot channel magnitude, displayed PSNR and waiting time over a short window.

    python scripts/snapshot.py --config configs/desk.json --window-ms 300 --snr-db 0

Uses realization 0 of the configured sweep; requires trained artifacts
(see run_table.py).
"""

import argparse
import sys
from pathlib import Path

from progtx import cli
from progtx.simulator import _atomic_text, snapshot_csv, snapshot_trace


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--window-ms", type=float, default=300.0)
    p.add_argument("--snr-db", type=float, default=0.0)
    p.add_argument("--out", default="out/snapshot.csv")
    args = p.parse_args(argv)

    cfg = cli._apply_flags(cli.load_config(args.config), argparse.Namespace())
    config = cli.experiment_config(cfg)
    rows = snapshot_trace(config, args.window_ms, snr_db=args.snr_db)
    _atomic_text(args.out, snapshot_csv(rows))
    print(Path(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
