"""Unseen-language and fine-tune sweep over seeds.

For every seed: train phone and feature models on four languages, score
them cold on the fifth, then fine-tune the phone model on 10% and 50% of
the target training tokens next to models trained on those tokens alone.
Writes unseen.csv and finetune.csv into --out.
"""

import argparse
import csv
from dataclasses import asdict
from pathlib import Path

from awe.experiments import evaluate_unseen, run_finetune_budgets, train_multilingual, transfer_spec
from awe.synth import synth_generate


def write(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--skip-finetune", action="store_true")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    unseen, tuned = [], []
    for seed in range(args.seeds):
        world = synth_generate(transfer_spec(seed))
        for fe in ("phone", "feature"):
            ckpt = train_multilingual(world, fe, seed, args.epochs)
            unseen.append(asdict(evaluate_unseen(world, ckpt, fe, seed)))
            print(unseen[-1], flush=True)
            if fe == "phone" and not args.skip_finetune:
                for r in run_finetune_budgets(world, ckpt, seed, args.epochs):
                    tuned.append(asdict(r))
                    print(tuned[-1], flush=True)
    write(out / "unseen.csv", unseen)
    if tuned:
        write(out / "finetune.csv", tuned)


if __name__ == "__main__":
    main()
