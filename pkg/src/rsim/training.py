"""Losses, splits, pair sampling and the two training loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import DatasetError, DatasetIndex
from .network import Decoder, Discriminator, Encoder, NetworkConfig
from .store import FeatureStore
from .tensor import Tensor, backward, clip, log, mul

logger = logging.getLogger(__name__)

BCE_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


class InsufficientClassesError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    momentum: float = 0.9  # sgd-momentum only

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalisation)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# --------------------------------------------------------------------------
# losses


def mse_loss(image: Tensor, reconstruction: Tensor) -> Tensor:
    if image.shape != reconstruction.shape:
        raise ValueError(f"mse_loss: {image.shape} vs {reconstruction.shape}")
    d = image - reconstruction
    return (d * d).mean()


def bce_loss(y, probs: Tensor) -> Tensor:
    """Mean of ``-[y log p_match + (1 - y) log p_mismatch]`` with clamped probabilities."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    batched = probs.ndim == 2
    target = np.stack([y, 1.0 - y], axis=-1)
    if not batched:
        target = target[0]
    if target.shape != probs.shape:
        raise ValueError(f"bce_loss: labels {y.shape} do not match probabilities {probs.shape}")
    logp = log(clip(probs, BCE_EPS, 1.0 - BCE_EPS))
    return mul((logp * target).sum(), -1.0 / len(y))


# --------------------------------------------------------------------------
# optimisers


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.vel = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, vel in zip(self.params, self.vel):
            if p.grad is None:
                continue
            vel *= self.momentum
            vel += p.grad
            p.data = p.data - self.lr * vel


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    return SGDMomentum(params, config.learning_rate, config.momentum)


def _zero(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# splitting and pair sampling


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def split_dataset(index: DatasetIndex, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Seeded train/test split, per class when stratified; both lists keep index order."""
    rng = np.random.default_rng(spec.seed)
    train: set[str] = set()
    if spec.stratified:
        for name, ids in index.classes:
            if len(ids) < 2:
                raise DatasetError(f"class {name!r} has {len(ids)} image(s); stratified "
                                   "splitting needs at least 2")
            n_train = min(max(int(round(spec.train_fraction * len(ids))), 1), len(ids) - 1)
            chosen = rng.permutation(len(ids))[:n_train]
            train.update(ids[i] for i in chosen)
    else:
        ids = [i for i, _ in index.items()]
        if len(ids) < 2:
            raise DatasetError("need at least 2 images to split")
        n_train = min(max(int(round(spec.train_fraction * len(ids))), 1), len(ids) - 1)
        train.update(ids[i] for i in rng.permutation(len(ids))[:n_train])
    order = [i for i, _ in index.items()]
    return [i for i in order if i in train], [i for i in order if i not in train]


@dataclass
class PairSample:
    query_id: str
    candidate_id: str
    query_features: np.ndarray
    candidate_features: np.ndarray
    label: int


def sample_pairs(store: FeatureStore, count: int, balance: float = 0.5,
                 seed: int = 0) -> list[PairSample]:
    """``round(count * balance)`` same-class pairs, the rest cross-class; never self-pairs."""
    if not 0 <= balance <= 1:
        raise ValueError("balance must lie in [0, 1]")
    n_pos = int(round(count * balance))
    n_neg = count - n_pos
    labels = store.labels
    groups = store.label_index
    pos_anchors = [i for i, lab in enumerate(labels) if len(groups[lab]) >= 2]
    if n_pos and not pos_anchors:
        raise InsufficientClassesError("no class has two images; positive pairs impossible")
    if n_neg and len(groups) < 2:
        raise InsufficientClassesError("negative pairs need at least two classes")
    rng = np.random.default_rng(seed)
    idx_pairs = []
    for _ in range(n_pos):
        a = pos_anchors[rng.integers(len(pos_anchors))]
        mates = groups[labels[a]]
        b = a
        while b == a:
            b = mates[rng.integers(len(mates))]
        idx_pairs.append((a, b, 1))
    n = len(labels)
    for _ in range(n_neg):
        a = int(rng.integers(n))
        b = a
        while labels[b] == labels[a]:
            b = int(rng.integers(n))
        idx_pairs.append((a, b, 0))
    order = rng.permutation(len(idx_pairs))
    recs = store.records
    return [PairSample(recs[a].image_id, recs[b].image_id, recs[a].features, recs[b].features, y)
            for a, b, y in (idx_pairs[i] for i in order)]


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        write_history_csv(self.losses, path)


def write_history_csv(losses, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(losses, start=1):
            w.writerow([epoch, repr(float(loss))])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _fit(nets, step_loss, n_samples: int, config: TrainConfig, label: str) -> TrainHistory:
    """Shared epoch loop with early stopping; restores the best snapshot at the end."""
    params = [p for net in nets for p in net.parameters()]
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    hist = TrainHistory()
    best = [net.snapshot() for net in nets]
    stale = 0
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(n_samples, config.batch_size, rng):
            _zero(params)
            loss = step_loss(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{label}: non-finite loss at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
        hist.losses.append(epoch_loss)
        logger.info("%s epoch %d loss %.6g", label, epoch, epoch_loss)
        if epoch_loss < hist.best_loss - config.early_stop_min_delta:
            hist.best_loss, hist.best_epoch, stale = epoch_loss, epoch, 0
            best = [net.snapshot() for net in nets]
        else:
            stale += 1
            if epoch_loss < hist.best_loss:
                # improvement below min_delta still updates the kept parameters
                hist.best_loss, hist.best_epoch = epoch_loss, epoch
                best = [net.snapshot() for net in nets]
            if stale >= config.early_stop_patience:
                hist.stopped_early = True
                break
    for net, snap in zip(nets, best):
        net.load_state_arrays(snap)
    _zero(params)
    return hist


def train_autoencoder(images: np.ndarray, net_config: NetworkConfig, config: TrainConfig,
                      encoder: Optional[Encoder] = None, decoder: Optional[Decoder] = None,
                      ) -> tuple[Encoder, Decoder, TrainHistory]:
    """Minimise reconstruction MSE over ``images`` ``[N, H, W, C]`` in ``[0, 1]``."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_autoencoder needs at least one image")
    if images.shape[1:] != net_config.image_shape:
        raise ValueError(f"images {images.shape[1:]} != config {net_config.image_shape}")
    rng = np.random.default_rng(config.seed)
    encoder = encoder or Encoder(net_config, rng)
    decoder = decoder or Decoder(net_config, rng)
    if len(images) == 1:
        # a single image still needs two samples per batch-norm batch
        images = np.concatenate([images, images])

    def step(idx):
        x = Tensor(images[idx])
        return mse_loss(x, decoder(encoder(x, training=True), training=True))

    hist = _fit([encoder, decoder], step, len(images), config, "autoencoder")
    return encoder, decoder, hist


def pair_arrays(pairs: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xq = np.stack([p.query_features for p in pairs]).astype(np.float64)
    xm = np.stack([p.candidate_features for p in pairs]).astype(np.float64)
    y = np.array([p.label for p in pairs], dtype=np.float64)
    return xq, xm, y


def train_discriminator(pairs: Sequence[PairSample], disc: Discriminator, config: TrainConfig,
                        ) -> tuple[Discriminator, TrainHistory]:
    """Fit ``disc`` on precomputed (frozen-encoder) feature pairs under BCE."""
    if config.epochs == 0:
        return disc, TrainHistory()
    if len(pairs) < 2:
        raise ValueError("train_discriminator needs at least two pairs")
    xq, xm, y = pair_arrays(pairs)

    def step(idx):
        probs = disc(Tensor(xq[idx]), Tensor(xm[idx]), training=True)
        return bce_loss(y[idx], probs)

    hist = _fit([disc], step, len(pairs), config, "discriminator")
    return disc, hist


def pair_loss(pairs: Sequence[PairSample], disc: Discriminator) -> float:
    """Eval-mode mean BCE over ``pairs``."""
    from .tensor import no_grad

    xq, xm, y = pair_arrays(pairs)
    with no_grad():
        return bce_loss(y, disc(Tensor(xq), Tensor(xm), training=False)).item()
