"""Command line entry point: ``rsim <command> [flags]``.

Every command writes ``manifest_<command>.json`` next to its outputs. On
failure it prints one diagnostic line to stderr, removes what it had
written and exits with status 1.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import SyntheticSpec, generate_synthetic, load_image, load_images, scan_directory
from .evaluation import PROTOCOLS, EvalConfig, evaluate, store_split
from .network import Discriminator, NetworkConfig, desk_config, encode
from .retrieval import SCORER_KINDS, Scorer, rank_all, top_n
from .store import build_store, load_store, save_store
from .training import (
    SplitSpec,
    TrainConfig,
    sample_pairs,
    split_dataset,
    train_autoencoder,
    train_discriminator,
)

logger = logging.getLogger("rsim")

AE_CHECKPOINT = "autoencoder.rsim"
MODEL_CHECKPOINT = "model.rsim"
STORE_FILE = "features.rsfs"


class CommandError(Exception):
    pass


# --------------------------------------------------------------------------
# run bookkeeping


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root) -> str:
    """Digest of every file below ``root`` (relative path and bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        if p.name.startswith("manifest_"):
            continue
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(sha256_file(p).encode())
    return h.hexdigest()


class Run:
    """Tracks outputs of one command so a failure can remove them."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.outputs: list[Path] = []
        self.trees: list[Path] = []
        self.made_dirs: list[Path] = []
        self.start = time.perf_counter()

    def out_dir(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.made_dirs += reversed(missing)
        return path

    def output(self, path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def tree(self, path) -> Path:
        path = Path(path)
        self.trees.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.outputs:
            with contextlib.suppress(OSError):
                p.unlink()
            with contextlib.suppress(OSError):
                p.with_name(p.name + ".tmp").unlink()
        for t in self.trees:
            shutil.rmtree(t, ignore_errors=True)
        for d in reversed(self.made_dirs):
            with contextlib.suppress(OSError):
                d.rmdir()

    def write_manifest(self, out_dir, config: dict, seeds: dict, inputs: dict) -> Path:
        path = self.output(Path(out_dir) / f"manifest_{self.command}.json")
        artifacts = {str(p): sha256_file(p) for p in self.outputs if p != path and p.is_file()}
        for t in self.trees:
            artifacts[str(t) + "/"] = tree_digest(t)
        manifest = {
            "command": self.command,
            "version": __version__,
            "argv": vars(self.args) | {"func": None},
            "config": config,
            "seeds": seeds,
            "inputs": inputs,
            "outputs": sorted(str(p) for p in self.outputs if p != path) + [str(t) for t in self.trees],
            "artifact_sha256": artifacts,
            "wall_clock_seconds": round(time.perf_counter() - self.start, 3),
            "threads": os.environ.get("RSIM_THREADS"),
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                       seed=args.seed, early_stop_patience=args.patience)


def _ckpt_config(ckpt: Checkpoint) -> dict:
    return {"network": asdict(ckpt.config)}


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, run: Run) -> None:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise CommandError(f"{out} exists and is not empty")
    run.tree(out)
    spec = SyntheticSpec(class_count=args.classes, images_per_class=args.per_class,
                         image_side=args.side, seed=args.seed)
    index = generate_synthetic(spec, out)
    # tree is kept on success; cleanup only runs on failure
    run.write_manifest(out, {"synthetic": asdict(spec)}, {"seed": args.seed}, {})
    print(f"wrote {index.total} images in {len(index.classes)} classes to {out}")


def cmd_train_ae(args, run: Run) -> None:
    index = scan_directory(args.data)
    cfg = desk_config() if args.side == 64 else _scaled_config(args.side)
    train_ids, test_ids = split_dataset(index, SplitSpec(args.split, args.split_seed))
    images = load_images(index, train_ids, cfg.input_side)
    enc, dec, hist = train_autoencoder(images, cfg, _train_config(args))
    out = run.out_dir(args.out)
    save_checkpoint(Checkpoint(cfg, enc, dec), run.output(out / AE_CHECKPOINT))
    hist.write_csv(run.output(out / "ae_history.csv"))
    with open(run.output(out / "split.json"), "w") as f:
        json.dump({"train": train_ids, "test": test_ids}, f, indent=1)
    run.write_manifest(out, {"train": asdict(_train_config(args)), "split": args.split,
                             "network": asdict(cfg)},
                       {"seed": args.seed, "split_seed": args.split_seed},
                       {"data": str(args.data)})
    print(f"autoencoder: {len(hist.losses)} epochs, best loss {hist.best_loss:.6f} "
          f"(epoch {hist.best_epoch}) -> {out / AE_CHECKPOINT}")


def _scaled_config(side: int) -> NetworkConfig:
    base = desk_config()
    if side % 8 or side < 8:
        raise CommandError("--side must be a multiple of 8")
    return NetworkConfig(side, 3, side // 8, base.latent_channels, base.encoder_stages,
                         base.discriminator_stages)


def cmd_extract(args, run: Run) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.encoder is None:
        raise CommandError(f"{args.checkpoint} holds no encoder")
    index = scan_directory(args.data)
    side = ckpt.config.input_side
    store = build_store(index.items(), lambda i: load_image(index.path(i), side), ckpt.encoder)
    out = run.out_dir(args.out)
    save_store(store, run.output(out / STORE_FILE))
    run.write_manifest(out, _ckpt_config(ckpt), {}, {"data": str(args.data),
                                                    "checkpoint": str(args.checkpoint)})
    print(f"stored {len(store)} feature volumes {store.feature_shape} -> {out / STORE_FILE}")


def cmd_train_disc(args, run: Run) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    store = load_store(args.store)
    if store.feature_shape != ckpt.config.latent_shape:
        raise CommandError(f"store shape {store.feature_shape} does not match checkpoint latent "
                           f"{ckpt.config.latent_shape}")
    train_ids, _ = store_split(store, args.split, args.split_seed)
    pairs = sample_pairs(store.subset(train_ids), args.pairs, args.balance, seed=args.seed)
    disc = Discriminator(ckpt.config, np.random.default_rng(args.seed))
    disc, hist = train_discriminator(pairs, disc, _train_config(args))
    ckpt.discriminator = disc
    out = run.out_dir(args.out)
    save_checkpoint(ckpt, run.output(out / MODEL_CHECKPOINT))
    hist.write_csv(run.output(out / "disc_history.csv"))
    run.write_manifest(out, {"train": asdict(_train_config(args)), "pairs": args.pairs,
                             "balance": args.balance, "split": args.split},
                       {"seed": args.seed, "split_seed": args.split_seed},
                       {"store": str(args.store), "checkpoint": str(args.checkpoint)})
    print(f"discriminator: {len(hist.losses)} epochs, best loss {hist.best_loss:.6f} "
          f"-> {out / MODEL_CHECKPOINT}")


def _scorer(kind: str, checkpoint) -> Scorer:
    if kind != "discriminator":
        return Scorer(kind)
    if checkpoint is None:
        raise CommandError("--scorer discriminator needs --checkpoint")
    ckpt = load_checkpoint(checkpoint)
    if ckpt.discriminator is None:
        raise CommandError(f"{checkpoint} holds no discriminator")
    return Scorer(kind, ckpt.discriminator)


def cmd_query(args, run: Run) -> None:
    store = load_store(args.store)
    if args.image_id is not None:
        query = store.get(args.image_id).features
        qid = args.image_id
    else:
        if args.checkpoint is None:
            raise CommandError("--image needs --checkpoint to encode it")
        ckpt = load_checkpoint(args.checkpoint)
        img = load_image(args.image, ckpt.config.input_side)
        # stored features are single precision; match them
        query = encode(img, ckpt.encoder).grid.astype(np.float32)
        qid = str(args.image)
    scorer = _scorer(args.scorer, args.checkpoint)
    exclude = args.image_id if args.exclude_self else None
    ranked = rank_all(query, store, scorer, exclude_id=exclude, query_id=qid)
    if args.top_n is not None:
        ranked = top_n(ranked, args.top_n)
    out = run.out_dir(args.out)
    ranked.write_csv(run.output(out / "ranked.csv"))
    run.write_manifest(out, {"scorer": args.scorer, "top_n": args.top_n}, {},
                       {"store": str(args.store), "query": qid})
    for e in ranked.entries[:min(len(ranked), 10)]:
        print(f"{e.rank}\t{e.image_id}\t{e.class_label}\t{e.score:.6g}")


def cmd_evaluate(args, run: Run) -> None:
    store = load_store(args.store)
    scorer = _scorer(args.scorer, args.checkpoint)
    config = EvalConfig(scorer=args.scorer, protocol=args.protocol, train_fraction=args.split,
                        split_seed=args.split_seed, queries_per_class=args.queries_per_class,
                        query_seed=args.seed)
    report = evaluate(store, scorer, config)
    out = run.out_dir(args.out)
    for p in report.write(out):
        run.output(p)
    run.write_manifest(out, asdict(config), {"query_seed": args.seed, "split_seed": args.split_seed},
                       {"store": str(args.store), "checkpoint": str(args.checkpoint)})
    print(f"{args.scorer}/{args.protocol}: {len(report.queries)} queries, "
          f"ANMRR {report.anmrr:.4f}, mAP {100 * report.map:.2f}%")


# --------------------------------------------------------------------------
# parser


def _add_training(p, epochs, batch=16, lr=1e-3):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=batch)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience (epochs)")


def _add_split(p):
    p.add_argument("--split", type=float, default=0.8, help="train fraction")
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsim", description="Remote-sensing image retrieval "
                                     "with autoencoder features and a learned pair discriminator.")
    parser.add_argument("--version", action="version", version=f"rsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="train the autoencoder on the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=64)
    _add_training(p, epochs=50)
    _add_split(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("extract", help="encode every image into a feature store")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-disc", help="train the pair discriminator on stored features")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True, help="autoencoder checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=4000)
    p.add_argument("--balance", type=float, default=0.5)
    _add_training(p, epochs=15)
    _add_split(p)
    p.set_defaults(func=cmd_train_disc)

    p = sub.add_parser("query", help="rank the store against one image")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="image file, encoded with --checkpoint")
    src.add_argument("--image-id", help="id of a stored record")
    p.add_argument("--checkpoint")
    p.add_argument("--scorer", choices=SCORER_KINDS, default="euclidean")
    p.add_argument("--top-n", type=int)
    p.add_argument("--exclude-self", action="store_true", help="drop --image-id from the ranking")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score held-out queries and write a metrics report")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--scorer", choices=SCORER_KINDS, default="euclidean")
    p.add_argument("--protocol", choices=PROTOCOLS, default="retrieval")
    p.add_argument("--queries-per-class", type=int)
    p.add_argument("--seed", type=int, default=0, help="query sampling seed")
    _add_split(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit():
    n = os.environ.get("RSIM_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        limit = int(n)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise CommandError(f"RSIM_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    run = Run(args.command, args)
    try:
        with _thread_limit():
            args.func(args, run)
    except KeyboardInterrupt:
        run.cleanup()
        print("rsim: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one line, no traceback
        run.cleanup()
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"rsim {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            logger.exception("details")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
