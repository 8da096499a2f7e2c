"""Compare scorers on an existing feature store across seeds of the query split.

    python scripts/compare_scorers.py --store runs/desk/store/features.rsfs \
        --checkpoint runs/desk/disc/model.rsim [--split-seeds 0 1 2]

The split seed must match the one the discriminator was trained with for the
held-out numbers to be honest; other seeds leak training images into the
queries and are printed for contrast only.
"""
import argparse

import numpy as np

from rsim.checkpoint import load_checkpoint
from rsim.evaluation import PROTOCOLS, EvalConfig, evaluate
from rsim.retrieval import SCORER_KINDS, Scorer
from rsim.store import load_store


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", help="needed for the discriminator scorer")
    p.add_argument("--protocol", choices=PROTOCOLS, default="matching")
    p.add_argument("--split-seeds", type=int, nargs="+", default=[0])
    args = p.parse_args()

    store = load_store(args.store)
    scorers = {k: Scorer(k) for k in SCORER_KINDS if k != "discriminator"}
    if args.checkpoint:
        scorers["discriminator"] = Scorer("discriminator", load_checkpoint(args.checkpoint).discriminator)

    print(f"{'scorer':<14} {'mAP(%)':>16} {'ANMRR':>16}")
    for name, scorer in scorers.items():
        maps, anmrrs = [], []
        for s in args.split_seeds:
            report = evaluate(store, scorer, EvalConfig(scorer=name, protocol=args.protocol, split_seed=s))
            maps.append(100 * report.map)
            anmrrs.append(report.anmrr)
        print(f"{name:<14} {np.mean(maps):8.2f} ± {np.std(maps):5.2f} "
              f"{np.mean(anmrrs):8.4f} ± {np.std(anmrrs):5.4f}")


if __name__ == "__main__":
    main()
