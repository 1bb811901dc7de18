"""Nearest seen phone of a composed unseen-phone vector, feature vs phone front-end."""

import argparse
import csv
from dataclasses import asdict

from awe.experiments import run_unseen_phone


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--out", default="unseen_phone.csv")
    args = ap.parse_args()
    rows = []
    for seed in range(args.seeds):
        for fe in ("feature", "phone"):
            r = run_unseen_phone(seed, fe, args.epochs)
            if r is not None:
                rows.append(asdict(r))
                print(rows[-1], flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for fe in ("feature", "phone"):
        sub = [r for r in rows if r["front_end"] == fe]
        print(fe, "hit rate", sum(r["hit"] for r in sub) / len(sub),
              "chance", sum(r["chance"] for r in sub) / len(sub))


if __name__ == "__main__":
    main()
