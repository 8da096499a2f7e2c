"""Persistent feature database.

File layout (little-endian)::

    b"RSFS" | version u32 | rank u32 | extents u32 * rank | count u64
    per record: id_len u16, id utf-8, label_len u16, label utf-8, values f32 * prod(extents)
    crc32 u32 over every preceding byte
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .binio import (
    BadMagicError,
    ChecksumError,
    Reader,
    VersionMismatchError,
    with_crc,
)

MAGIC = b"RSFS"
VERSION = 1


class UnknownImageError(KeyError):
    pass


@dataclass
class FeatureRecord:
    image_id: str
    class_label: str
    features: np.ndarray  # float32

    def __eq__(self, other):
        return (isinstance(other, FeatureRecord) and self.image_id == other.image_id
                and self.class_label == other.class_label
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features))


@dataclass
class FeatureStore:
    feature_shape: tuple[int, ...]
    records: list[FeatureRecord] = field(default_factory=list)
    version: int = VERSION

    def __post_init__(self):
        self.feature_shape = tuple(int(d) for d in self.feature_shape)
        self._by_id: dict[str, int] = {}
        self._labels: dict[str, list[int]] = {}
        for r in list(self.records):
            self._index(r, len(self._by_id))

    def _index(self, record: FeatureRecord, position: int) -> None:
        if record.image_id in self._by_id:
            raise ValueError(f"duplicate image id {record.image_id!r}")
        if record.features.shape != self.feature_shape:
            raise ValueError(f"{record.image_id}: feature shape {record.features.shape} "
                             f"!= store shape {self.feature_shape}")
        self._by_id[record.image_id] = position
        self._labels.setdefault(record.class_label, []).append(position)

    def add(self, image_id: str, class_label: str, features: np.ndarray) -> FeatureRecord:
        rec = FeatureRecord(image_id, class_label, np.asarray(features, dtype=np.float32))
        self._index(rec, len(self.records))
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        return (isinstance(other, FeatureStore) and self.feature_shape == other.feature_shape
                and self.version == other.version and self.records == other.records)

    @property
    def label_index(self) -> dict[str, list[int]]:
        return {k: list(v) for k, v in self._labels.items()}

    @property
    def labels(self) -> list[str]:
        return [r.class_label for r in self.records]

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def matrix(self, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        """Stacked features ``[n, *feature_shape]`` as float64."""
        recs = self.records if ids is None else [self.get(i) for i in ids]
        if not recs:
            return np.zeros((0,) + self.feature_shape)
        return np.stack([r.features for r in recs]).astype(np.float64)

    def get(self, image_id: str) -> FeatureRecord:
        try:
            return self.records[self._by_id[image_id]]
        except KeyError:
            raise UnknownImageError(image_id) from None

    def records_except(self, image_id: Optional[str]) -> Iterator[FeatureRecord]:
        return (r for r in self.records if r.image_id != image_id)

    def subset(self, ids: Iterable[str]) -> "FeatureStore":
        wanted = set(ids)
        return FeatureStore(self.feature_shape, [r for r in self.records if r.image_id in wanted])


def build_store(items, images_or_loader, encoder, batch_size: int = 32) -> FeatureStore:
    """Encode every image (eval mode) into a new store.

    ``items`` is a sequence of ``(image_id, class_label)``; ``images_or_loader``
    is either an array aligned with ``items`` or a callable mapping an image id
    to an ``H x W x C`` array.
    """
    from .network import encode_batch

    items = list(items)
    store = FeatureStore(encoder.config.latent_shape)
    if not items:
        return store
    errors = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        if callable(images_or_loader):
            batch = []
            for image_id, _ in chunk:
                try:
                    img = np.asarray(images_or_loader(image_id), dtype=np.float64)
                    if img.shape != encoder.config.image_shape:
                        raise ValueError(f"shape {img.shape} != {encoder.config.image_shape}")
                    batch.append(img)
                except Exception as exc:  # collected and reported together
                    errors.append(f"{image_id}: {exc}")
            if errors:
                continue
            batch = np.stack(batch)
        else:
            batch = np.asarray(images_or_loader[start:start + batch_size], dtype=np.float64)
        feats = encode_batch(batch, encoder, batch_size)
        for (image_id, label), f in zip(chunk, feats):
            store.add(image_id, label, f)
    if errors:
        raise ValueError(f"store build failed for {len(errors)} image(s): " + "; ".join(errors[:5]))
    return store


# --------------------------------------------------------------------------
# serialisation


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for store: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def store_to_bytes(store: FeatureStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", store.version), struct.pack("<I", len(store.feature_shape))]
    parts.append(struct.pack(f"<{len(store.feature_shape)}I", *store.feature_shape))
    parts.append(struct.pack("<Q", len(store.records)))
    for r in store.records:
        parts += [_pack_str(r.image_id), _pack_str(r.class_label),
                  np.ascontiguousarray(r.features, dtype="<f4").tobytes()]
    return with_crc(b"".join(parts))


def store_from_bytes(data: bytes, expected_version: int = VERSION) -> FeatureStore:
    rd = Reader(data)
    if rd.take(4) != MAGIC:
        raise BadMagicError("not a feature store file")
    (version,) = rd.unpack("<I")
    if version != expected_version:
        raise VersionMismatchError(f"store version {version}, reader supports {expected_version}")
    (rank,) = rd.unpack("<I")
    if rank > 16:
        raise ChecksumError(f"implausible feature rank {rank}")
    shape = rd.unpack(f"<{rank}I")
    (count,) = rd.unpack("<Q")
    n = int(np.prod(shape))
    records = []
    try:
        for _ in range(count):
            (ln,) = rd.unpack("<H")
            image_id = rd.take(ln).decode("utf-8")
            (ln,) = rd.unpack("<H")
            label = rd.take(ln).decode("utf-8")
            values = np.frombuffer(rd.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
            records.append(FeatureRecord(image_id, label, values))
    except UnicodeDecodeError as exc:
        raise ChecksumError(f"corrupt string field: {exc}") from exc
    rd.verify_trailer()
    return FeatureStore(shape, records, version)


def save_store(store: FeatureStore, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(store_to_bytes(store))
    os.replace(tmp, path)


def load_store(path) -> FeatureStore:
    return store_from_bytes(Path(path).read_bytes())
