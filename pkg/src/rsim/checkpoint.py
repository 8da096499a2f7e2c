"""Model checkpoints.

File layout (little-endian)::

    b"RSIM" | version u32
    config: input_side, input_channels, latent_side, latent_channels (u32 each),
            encoder stage count u32, then per stage kind, in, out, stride, direction (u32 each),
            discriminator stage count u32, same per-stage fields
    contents u32 (bit 0 encoder, bit 1 decoder, bit 2 discriminator)
    tensor count u32, then per tensor: rank u32, dims u32 * rank, values f64
    crc32 u32 over every preceding byte

Tensors follow the canonical order of each network's ``state_arrays()``:
trainable parameters first, then batch-norm running mean/var pairs.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .network import Decoder, Discriminator, Encoder, NetworkConfig, ResidualBlockSpec
from .binio import BadMagicError, ChecksumError, FormatError, Reader, VersionMismatchError, with_crc

MAGIC = b"RSIM"
VERSION = 1
ENCODER, DECODER, DISCRIMINATOR = 1, 2, 4


@dataclass
class Checkpoint:
    config: NetworkConfig
    encoder: Optional[Encoder] = None
    decoder: Optional[Decoder] = None
    discriminator: Optional[Discriminator] = None


def _pack_stages(stages) -> bytes:
    out = [struct.pack("<I", len(stages))]
    for s in stages:
        out.append(struct.pack("<5I", 0 if s.kind == "A" else 1, s.in_channels, s.out_channels,
                               s.stride, 0 if s.direction == "encode" else 1))
    return b"".join(out)


def _unpack_stages(rd: Reader) -> list[ResidualBlockSpec]:
    (n,) = rd.unpack("<I")
    if n > 1024:
        raise ChecksumError(f"implausible stage count {n}")
    stages = []
    for _ in range(n):
        kind, cin, cout, stride, direction = rd.unpack("<5I")
        stages.append(ResidualBlockSpec("A" if kind == 0 else "B", cin, cout, stride,
                                        "encode" if direction == 0 else "decode"))
    return stages


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    c = ckpt.config
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<4I", c.input_side, c.input_channels, c.latent_side, c.latent_channels),
             _pack_stages(c.encoder_stages), _pack_stages(c.discriminator_stages)]
    nets = [(ENCODER, ckpt.encoder), (DECODER, ckpt.decoder), (DISCRIMINATOR, ckpt.discriminator)]
    contents = sum(bit for bit, net in nets if net is not None)
    arrays = [a for _, net in nets if net is not None for a in net.state_arrays()]
    parts += [struct.pack("<I", contents), struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return with_crc(b"".join(parts))


def checkpoint_from_bytes(data: bytes, expected_version: int = VERSION) -> Checkpoint:
    rd = Reader(data)
    if rd.take(4) != MAGIC:
        raise BadMagicError("not a model checkpoint")
    (version,) = rd.unpack("<I")
    if version != expected_version:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {expected_version}")
    dims = rd.unpack("<4I")
    enc_stages = _unpack_stages(rd)
    disc_stages = _unpack_stages(rd)
    (contents,) = rd.unpack("<I")
    (count,) = rd.unpack("<I")
    arrays = []
    for _ in range(count):
        (rank,) = rd.unpack("<I")
        if rank > 8:
            raise ChecksumError(f"implausible tensor rank {rank}")
        shape = rd.unpack(f"<{rank}I")
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    rd.verify_trailer()
    try:
        config = NetworkConfig(*dims, encoder_stages=enc_stages, discriminator_stages=disc_stages)
    except ValueError as exc:
        raise FormatError(f"checkpoint holds an invalid config: {exc}") from exc
    ckpt = Checkpoint(config)
    rng = np.random.default_rng(0)
    pos = 0
    for bit, attr, cls in ((ENCODER, "encoder", Encoder), (DECODER, "decoder", Decoder),
                           (DISCRIMINATOR, "discriminator", Discriminator)):
        if contents & bit:
            net = cls(config, rng)
            n = len(net.state_arrays())
            net.load_state_arrays(arrays[pos:pos + n])
            pos += n
            setattr(ckpt, attr, net)
    if pos != len(arrays):
        raise FormatError(f"checkpoint has {len(arrays) - pos} unexpected tensors")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
