"""PSNR versus fraction of masked channels, importance order against random orders.

    python scripts/masking_curve.py --manifest data/kodak/manifest.json --out out/masking_curve.csv

Ranks channels on the calibration split, then writes one CSV row per
(image, keep fraction) with the sorted-order PSNR and the mean and standard
deviation over random orders.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from progtx.imageio import default_data_root, load_manifest
from progtx.observer import masking_curve, rank_channels


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--manifest", default=str(default_data_root() / "kodak" / "manifest.json"))
    p.add_argument("--out", default="out/masking_curve.csv")
    p.add_argument("--random-orders", type=int, default=20)
    p.add_argument("--images", type=int, default=5, help="evaluation images used")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    corpus = load_manifest(args.manifest)
    ranking = rank_channels([im for _, im in corpus.load("calibration")])
    c = len(ranking.order)
    fractions = [f / 10 for f in range(1, 10)]
    keeps = [round(c * (1 - f)) for f in reversed(fractions)]
    rng = np.random.default_rng(args.seed)
    orders = [rng.permutation(c).tolist() for _ in range(args.random_orders)]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "masked_fraction", "keep", "psnr_sorted", "psnr_random_mean",
                    "psnr_random_std"])
        for name, img in corpus.load("evaluation")[: args.images]:
            ranked = masking_curve(ranking, img, keeps)
            rand = np.array([[v for _, v in masking_curve(ranking, img, keeps, order=o)]
                             for o in orders])
            for i, (k, v) in enumerate(ranked):
                w.writerow([name, f"{1 - k / c:.2f}", k, f"{v:.4f}",
                            f"{rand[:, i].mean():.4f}", f"{rand[:, i].std():.4f}"])
            print(f"{name}: done", file=sys.stderr)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
