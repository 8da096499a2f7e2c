"""Run the full desk pipeline through the CLI and print the headline numbers.

    python scripts/run_pipeline.py --root runs/desk [--seed 0]

Writes corpus/, ae/, store/, disc/ and one evaluation directory per scorer
and protocol under --root.
"""
import argparse
import csv
import sys
import time
from pathlib import Path

from rsim import cli


def step(*argv):
    t = time.perf_counter()
    code = cli.main([str(a) for a in argv])
    if code:
        sys.exit(f"step {argv[0]} failed with status {code}")
    print(f"  {argv[0]}: {time.perf_counter() - t:.1f}s")


def summary(path):
    with open(path) as f:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(f)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ae-epochs", type=int, default=50)
    p.add_argument("--disc-epochs", type=int, default=15)
    args = p.parse_args()
    root = Path(args.root)
    seed = ["--seed", args.seed]

    step("synth", "--out", root / "corpus", *seed)
    step("train-ae", "--data", root / "corpus", "--out", root / "ae", "--epochs", args.ae_epochs, *seed)
    ae = root / "ae" / cli.AE_CHECKPOINT
    step("extract", "--data", root / "corpus", "--checkpoint", ae, "--out", root / "store")
    store = root / "store" / cli.STORE_FILE
    step("train-disc", "--store", store, "--checkpoint", ae, "--out", root / "disc",
         "--epochs", args.disc_epochs, *seed)
    model = root / "disc" / cli.MODEL_CHECKPOINT

    rows = []
    for protocol in ("matching", "retrieval"):
        for scorer in ("euclidean", "cosine", "discriminator"):
            out = root / f"eval_{protocol}_{scorer}"
            step("evaluate", "--store", store, "--checkpoint", model, "--scorer", scorer,
                 "--protocol", protocol, "--out", out)
            s = summary(out / "summary.csv")
            rows.append((protocol, scorer, s["mAP"], s["ANMRR"]))
    print(f"\n{'protocol':<10} {'scorer':<14} {'mAP(%)':>8} {'ANMRR':>7}")
    for protocol, scorer, m, a in rows:
        print(f"{protocol:<10} {scorer:<14} {m:8.2f} {a:7.4f}")


if __name__ == "__main__":
    main()
