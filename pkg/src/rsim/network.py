"""Residual encoder, decoder and pair discriminator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dense,
    flatten,
    no_grad,
    relu,
    sigmoid,
    softmax2,
)

COMPRESSION_LIMIT = 0.17


@dataclass(frozen=True)
class ResidualBlockSpec:
    kind: str  # "A" identity skip, "B" projection skip
    in_channels: int
    out_channels: int
    stride: int = 1
    direction: str = "encode"

    def __post_init__(self):
        if self.kind not in ("A", "B"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.direction not in ("encode", "decode"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.stride not in (1, 2):
            raise ValueError("block stride must be 1 or 2")
        needs_projection = self.in_channels != self.out_channels or self.stride != 1
        if self.kind == "A" and needs_projection:
            raise ValueError("kind A blocks need equal channels and stride 1")
        if self.kind == "B" and not needs_projection:
            raise ValueError("kind B blocks are for channel or stride changes")

    def mirrored(self) -> "ResidualBlockSpec":
        """The decoder block undoing this encoder block."""
        return ResidualBlockSpec(self.kind, self.out_channels, self.in_channels, self.stride,
                                 "decode" if self.direction == "encode" else "encode")


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int
    input_channels: int
    latent_side: int
    latent_channels: int
    encoder_stages: tuple[ResidualBlockSpec, ...]
    discriminator_stages: tuple[ResidualBlockSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "encoder_stages", tuple(self.encoder_stages))
        object.__setattr__(self, "discriminator_stages", tuple(self.discriminator_stages))
        if not self.encoder_stages:
            raise ValueError("encoder needs at least one stage")
        factor = int(np.prod([s.stride for s in self.encoder_stages]))
        if self.latent_side * factor != self.input_side:
            raise ValueError(f"encoder strides multiply to {factor}, "
                             f"need {self.input_side}/{self.latent_side}")
        chans = [self.input_channels]
        for s in self.encoder_stages:
            if s.in_channels != chans[-1] or s.direction != "encode":
                raise ValueError(f"encoder stage {s} does not chain")
            chans.append(s.out_channels)
        if chans[-1] != self.latent_channels:
            raise ValueError("last encoder stage must emit latent_channels")
        c = 2 * self.latent_channels
        for s in self.discriminator_stages:
            if s.in_channels != c or s.direction != "encode":
                raise ValueError(f"discriminator stage {s} does not chain")
            c = s.out_channels

    @property
    def decoder_stages(self) -> tuple[ResidualBlockSpec, ...]:
        return tuple(s.mirrored() for s in reversed(self.encoder_stages))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.input_side, self.input_side, self.input_channels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_side, self.latent_side, self.latent_channels)

    @property
    def compression_ratio(self) -> float:
        return float(np.prod(self.latent_shape) / np.prod(self.image_shape))

    @property
    def discriminator_flat_size(self) -> int:
        side = self.latent_side
        for s in self.discriminator_stages:
            side = (side - 1) // s.stride + 1
        c = self.discriminator_stages[-1].out_channels if self.discriminator_stages \
            else 2 * self.latent_channels
        return side * side * c


def _chain(channels, strides, direction="encode"):
    return tuple(ResidualBlockSpec("B", a, b, s, direction)
                 for a, b, s in zip(channels[:-1], channels[1:], strides))


def desk_config() -> NetworkConfig:
    """64x64x3 images to an 8x8x32 latent grid.

    Three stride-2 projection stages (3->8->16->32) and one identity stage at
    the latent resolution, which lowers reconstruction error at little cost.
    """
    return NetworkConfig(
        input_side=64, input_channels=3, latent_side=8, latent_channels=32,
        encoder_stages=_chain([3, 8, 16, 32], [2, 2, 2]) + (ResidualBlockSpec("A", 32, 32),),
        discriminator_stages=_chain([64, 64, 64, 32], [2, 2, 1]),
    )


def paper_config() -> NetworkConfig:
    """256x256x3 images to an 8x8x512 latent grid."""
    return NetworkConfig(
        input_side=256, input_channels=3, latent_side=8, latent_channels=512,
        encoder_stages=_chain([3, 32, 64, 128, 256, 512], [2, 2, 2, 2, 2]),
        discriminator_stages=_chain([1024, 64, 64, 32], [2, 2, 1]),
    )


def tiny_config() -> NetworkConfig:
    """Smallest useful geometry; for gradient checks and smoke runs."""
    return NetworkConfig(
        input_side=8, input_channels=3, latent_side=2, latent_channels=2,
        encoder_stages=_chain([3, 4, 2], [2, 2]),
        discriminator_stages=(ResidualBlockSpec("B", 4, 3, 2),
                              ResidualBlockSpec("A", 3, 3, 1)),
    )


# --------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    @classmethod
    def fresh(cls, channels: int) -> "BatchNorm":
        return cls(Tensor(np.ones(channels), requires_grad=True), _zeros(channels),
                   RunningStats.fresh(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.stats, training)


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int
    transposed: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


def _make_conv(rng, k, cin, cout, stride, padding, transposed=False) -> Conv:
    if transposed:
        # each output site of an up-sampling conv sees about k*k/stride^2 input taps
        fan_in = max(1, (k * k * cin) // (stride * stride))
        w = _uniform(rng, (k, k, cout, cin), fan_in)
    else:
        w = _uniform(rng, (k, k, cin, cout), k * k * cin)
    return Conv(w, _zeros(cout), stride, padding, transposed)


@dataclass
class BlockParams:
    conv1: Conv
    bn1: BatchNorm
    conv2: Conv
    bn2: BatchNorm
    proj: Optional[Conv] = None


def init_block(spec: ResidualBlockSpec, rng: np.random.Generator) -> BlockParams:
    cin, cout, s = spec.in_channels, spec.out_channels, spec.stride
    up = spec.direction == "decode" and s == 2
    if up:
        # k=4, p=1 and k=2, p=0 both double the side exactly
        conv1 = _make_conv(rng, 4, cin, cout, 2, 1, transposed=True)
    else:
        conv1 = _make_conv(rng, 3, cin, cout, s, 1)
    conv2 = _make_conv(rng, 3, cout, cout, 1, 1)
    proj = None
    if spec.kind == "B":
        proj = _make_conv(rng, 2, cin, cout, 2, 0, transposed=True) if up \
            else _make_conv(rng, 1, cin, cout, s, 0)
    return BlockParams(conv1, BatchNorm.fresh(cout), conv2, BatchNorm.fresh(cout), proj)


def residual_block_forward(x: Tensor, spec: ResidualBlockSpec, params: BlockParams,
                           training: bool = False, activation: str = "relu") -> Tensor:
    """``act(F(x) + skip(x))`` with ``F = conv, bn, relu, conv, bn``.

    ``activation`` is ``"relu"``, ``"sigmoid"`` or ``"linear"``.
    """
    if x.shape[-1] != spec.in_channels:
        raise ShapeError(f"block expects {spec.in_channels} channels, got {x.shape[-1]}")
    h = relu(params.bn1(params.conv1(x), training))
    h = params.bn2(params.conv2(h), training)
    skip = params.proj(x) if spec.kind == "B" else x
    out = h + skip
    if activation == "relu":
        return relu(out)
    if activation == "sigmoid":
        return sigmoid(out)
    if activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def _block_tensors(prefix: str, p: BlockParams) -> list[tuple[str, Tensor]]:
    out = []
    for name, conv, bn in (("1", p.conv1, p.bn1), ("2", p.conv2, p.bn2)):
        out += [(f"{prefix}.conv{name}.weight", conv.weight),
                (f"{prefix}.conv{name}.bias", conv.bias),
                (f"{prefix}.bn{name}.gamma", bn.gamma),
                (f"{prefix}.bn{name}.beta", bn.beta)]
    if p.proj is not None:
        out += [(f"{prefix}.proj.weight", p.proj.weight), (f"{prefix}.proj.bias", p.proj.bias)]
    return out


def _block_stats(prefix: str, p: BlockParams) -> list[tuple[str, RunningStats]]:
    return [(f"{prefix}.bn1", p.bn1.stats), (f"{prefix}.bn2", p.bn2.stats)]


# --------------------------------------------------------------------------
# networks


class _Stack:
    """Shared plumbing: named tensors in canonical order, snapshots."""

    blocks: list[BlockParams]
    specs: tuple[ResidualBlockSpec, ...]
    name: str

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += _block_tensors(f"{self.name}.{i}", b)
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def running_stats(self) -> list[tuple[str, RunningStats]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += _block_stats(f"{self.name}.{i}", b)
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Every tensor needed to reproduce the network, in canonical order."""
        arrays = [t.data for t in self.parameters()]
        for _, st in self.running_stats():
            arrays += [st.mean, st.var]
        return arrays

    def load_state_arrays(self, arrays) -> None:
        params = self.parameters()
        stats = self.running_stats()
        expected = len(params) + 2 * len(stats)
        arrays = list(arrays)
        if len(arrays) != expected:
            raise ShapeError(f"{self.name}: expected {expected} tensors, got {len(arrays)}")
        for t, a in zip(params, arrays):
            if t.shape != np.shape(a):
                raise ShapeError(f"{self.name}: tensor shape {np.shape(a)} != {t.shape}")
            t.data = np.array(a, dtype=np.float64)
        rest = arrays[len(params):]
        for (_, st), mean, var in zip(stats, rest[0::2], rest[1::2]):
            st.mean = np.array(mean, dtype=np.float64)
            st.var = np.array(var, dtype=np.float64)

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


class Encoder(_Stack):
    name = "encoder"

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        self.specs = config.encoder_stages
        self.blocks = [init_block(s, rng) for s in self.specs]

    def __call__(self, images: Tensor, training: bool = False) -> Tensor:
        if images.shape[-3:] != self.config.image_shape:
            raise ShapeError(f"encoder expects {self.config.image_shape}, got {images.shape}")
        h = images
        last = len(self.blocks) - 1
        for i, (spec, p) in enumerate(zip(self.specs, self.blocks)):
            h = residual_block_forward(h, spec, p, training, "linear" if i == last else "relu")
        return h


class Decoder(_Stack):
    name = "decoder"

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        self.specs = config.decoder_stages
        self.blocks = [init_block(s, rng) for s in self.specs]

    def __call__(self, latent: Tensor, training: bool = False) -> Tensor:
        if latent.shape[-3:] != self.config.latent_shape:
            raise ShapeError(f"decoder expects {self.config.latent_shape}, got {latent.shape}")
        h = latent
        last = len(self.blocks) - 1
        for i, (spec, p) in enumerate(zip(self.specs, self.blocks)):
            h = residual_block_forward(h, spec, p, training, "sigmoid" if i == last else "relu")
        return h


class Discriminator(_Stack):
    name = "discriminator"

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        self.specs = config.discriminator_stages
        self.blocks = [init_block(s, rng) for s in self.specs]
        # zero head: untrained output is exactly (0.5, 0.5)
        self.weight = Tensor(np.zeros((2, config.discriminator_flat_size)), requires_grad=True)
        self.bias = _zeros(2)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return super().named_parameters() + [("discriminator.dense.weight", self.weight),
                                             ("discriminator.dense.bias", self.bias)]

    def logits(self, xq: Tensor, xm: Tensor, training: bool = False) -> Tensor:
        if xq.shape != xm.shape:
            raise ShapeError(f"feature pair shapes differ: {xq.shape} vs {xm.shape}")
        if xq.shape[-3:] != self.config.latent_shape:
            raise ShapeError(f"discriminator expects {self.config.latent_shape}, got {xq.shape}")
        h = concat_channels(xq, xm)
        for spec, p in zip(self.specs, self.blocks):
            h = residual_block_forward(h, spec, p, training)
        h = flatten(h, start_dim=h.ndim - 3)
        return dense(h, self.weight, self.bias)

    def __call__(self, xq: Tensor, xm: Tensor, training: bool = False) -> Tensor:
        """Probabilities ``[..., (p_match, p_mismatch)]``."""
        return softmax2(self.logits(xq, xm, training))


@dataclass
class FeatureVolume:
    grid: np.ndarray
    image_id: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.shape


def encode(image: np.ndarray, encoder: Encoder, image_id: Optional[str] = None) -> FeatureVolume:
    """Eval-mode encoding of one ``H x W x C`` image."""
    with no_grad():
        grid = encoder(Tensor(image), training=False).data
    return FeatureVolume(grid, image_id)


def encode_batch(images: np.ndarray, encoder: Encoder, batch_size: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(encoder(Tensor(images[i:i + batch_size]), training=False).data)
    if not out:
        return np.zeros((0,) + encoder.config.latent_shape)
    return np.concatenate(out)


def decode(features: FeatureVolume, decoder: Decoder) -> np.ndarray:
    with no_grad():
        return decoder(Tensor(features.grid), training=False).data


def discriminate(xq: FeatureVolume, xm: FeatureVolume, disc: Discriminator) -> tuple[float, float]:
    """Eval-mode ``(p_match, p_mismatch)`` for one feature pair."""
    with no_grad():
        p = disc(Tensor(xq.grid), Tensor(xm.grid), training=False).data
    return float(p[0]), float(p[1])


def match_probabilities(query: np.ndarray, candidates: np.ndarray, disc: Discriminator,
                        batch_size: int = 256) -> np.ndarray:
    """p_match of ``query`` against each candidate grid."""
    out = []
    with no_grad():
        for i in range(0, len(candidates), batch_size):
            cand = candidates[i:i + batch_size]
            q = np.broadcast_to(query, cand.shape)
            out.append(disc(Tensor(q), Tensor(cand), training=False).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)
