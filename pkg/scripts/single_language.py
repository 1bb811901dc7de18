"""Train on one synthetic language and compare against the raw-frame baseline."""

import argparse
import csv
from dataclasses import asdict

from awe.experiments import run_single_language


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--out", default="single_language.csv")
    args = ap.parse_args()
    rows = []
    for seed in range(args.seeds):
        r = run_single_language(seed, args.epochs)
        rows.append({"seed": seed, **asdict(r)})
        print(rows[-1], flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
