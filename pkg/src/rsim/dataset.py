"""Directory-per-class image corpora and the synthetic stand-in corpus.

Layout on disk is ``<root>/<class_name>/<image>.png``; image ids are the
paths relative to ``root`` with forward slashes.
"""
from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("disk", "square", "cross", "stripes-h", "stripes-v", "ring", "checker", "blob")
MANIFEST_NAME = "synthetic_manifest.json"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Optional[Path]
    classes: list[tuple[str, list[str]]]
    warnings: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(len(ids) for _, ids in self.classes)

    @property
    def class_names(self) -> list[str]:
        return [name for name, _ in self.classes]

    def items(self) -> list[tuple[str, str]]:
        """``(image_id, class_name)`` in index order."""
        return [(i, name) for name, ids in self.classes for i in ids]

    def path(self, image_id: str) -> Path:
        if self.root is None:
            raise DatasetError("index has no root directory")
        return self.root / image_id


def index_from_items(items) -> DatasetIndex:
    """Build an index from ``(image_id, class_name)`` pairs, keeping first-seen order."""
    classes: dict[str, list[str]] = {}
    for image_id, label in items:
        classes.setdefault(label, []).append(image_id)
    return DatasetIndex(None, list(classes.items()))


def scan_directory(root) -> DatasetIndex:
    """Index every decodable image below the class subdirectories of ``root``.

    Classes and ids are sorted lexicographically. Empty class folders are kept
    (with a warning); files PIL cannot identify are skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class subdirectories")
    classes, warnings = [], []
    for cdir in class_dirs:
        ids = []
        for f in sorted(p for p in cdir.iterdir() if p.is_file()):
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                warnings.append(f"{f.relative_to(root).as_posix()}: undecodable ({exc})")
                continue
            ids.append(f.relative_to(root).as_posix())
        if not ids:
            warnings.append(f"{cdir.name}: empty class")
        classes.append((cdir.name, ids))
    for w in warnings:
        logger.warning(w)
    return DatasetIndex(root, classes, warnings)


def load_image(path, target_side: int) -> np.ndarray:
    """Decode an image to ``target_side x target_side x 3`` floats in ``[0, 1]``.

    Resampling is bilinear (with PIL's area-aware support when shrinking) and
    runs on float planes so no intermediate 8-bit rounding occurs.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    if arr.shape[:2] != (target_side, target_side):
        planes = [Image.fromarray(np.ascontiguousarray(arr[:, :, c]), mode="F")
                  .resize((target_side, target_side), Image.BILINEAR) for c in range(3)]
        arr = np.stack([np.asarray(p, dtype=np.float32) for p in planes], axis=-1)
    return arr.astype(np.float64) / 255.0


def load_images(index: DatasetIndex, ids, target_side: int) -> np.ndarray:
    out = np.empty((len(ids), target_side, target_side, 3))
    errors = []
    for n, image_id in enumerate(ids):
        try:
            out[n] = load_image(index.path(image_id), target_side)
        except DatasetError as exc:
            errors.append(str(exc))
    if errors:
        raise DatasetError(f"{len(errors)} image(s) failed to load: " + "; ".join(errors[:5]))
    return out


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class ClassStyle:
    shape: str
    hue: float
    saturation: float = 0.85
    value: float = 0.9


@dataclass
class SyntheticSpec:
    class_count: int = 8
    images_per_class: int = 50
    image_side: int = 64
    channels: int = 3
    seed: int = 0
    position_jitter: float = 0.05  # fraction of the side
    scale_range: tuple[float, float] = (0.3, 0.38)  # shape radius / side
    rotation_jitter: float = 20.0  # degrees
    hue_jitter: float = 0.03
    noise_sigma: float = 0.02
    background_range: tuple[float, float] = (0.05, 0.95)

    def __post_init__(self):
        if not 1 <= self.class_count <= len(SHAPE_KINDS):
            raise ValueError(f"class_count must be in 1..{len(SHAPE_KINDS)}")
        if self.images_per_class < 1 or self.image_side < 8 or self.channels != 3:
            raise ValueError("invalid synthetic geometry")

    def styles(self) -> list[ClassStyle]:
        n = self.class_count
        return [ClassStyle(SHAPE_KINDS[i], hue=i / len(SHAPE_KINDS)) for i in range(n)]

    def class_names(self) -> list[str]:
        return [f"{i:02d}_{s.shape}" for i, s in enumerate(self.styles())]


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, radius: float,
                rng: np.random.Generator) -> np.ndarray:
    r = np.hypot(u, v)
    box = (np.abs(u) < radius) & (np.abs(v) < radius)
    period = radius / 1.5
    if kind == "disk":
        return r < radius
    if kind == "square":
        return (np.abs(u) < 0.85 * radius) & (np.abs(v) < 0.85 * radius)
    if kind == "cross":
        arm = radius / 3
        return ((np.abs(u) < arm) & (np.abs(v) < radius)) | ((np.abs(v) < arm) & (np.abs(u) < radius))
    if kind == "stripes-h":
        return box & (np.mod(v + radius, period) < period / 2)
    if kind == "stripes-v":
        return box & (np.mod(u + radius, period) < period / 2)
    if kind == "ring":
        return (r < radius) & (r > 0.55 * radius)
    if kind == "checker":
        cell = radius / 2
        return box & ((np.floor((u + radius) / cell) + np.floor((v + radius) / cell)) % 2 == 0)
    if kind == "blob":
        field_ = np.zeros_like(u)
        for _ in range(4):
            cu, cv = rng.uniform(-0.5, 0.5, size=2) * radius
            s = rng.uniform(0.35, 0.55) * radius
            field_ += np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
        return field_ > 0.6
    raise ValueError(f"unknown shape kind {kind!r}")


def render_image(style: ClassStyle, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One ``side x side x 3`` float image in ``[0, 1]``."""
    side = spec.image_side
    lo, hi = spec.background_range
    background = rng.uniform(lo, hi, size=3)
    hue = (style.hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, style.saturation, style.value))
    cx, cy = side / 2 + rng.uniform(-1, 1, size=2) * spec.position_jitter * side
    radius = rng.uniform(*spec.scale_range) * side
    theta = np.deg2rad(rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    du, dv = xx - cx, yy - cy
    u = np.cos(theta) * du + np.sin(theta) * dv
    v = -np.sin(theta) * du + np.cos(theta) * dv
    mask = _shape_mask(style.shape, u, v, radius, rng)
    img = np.where(mask[:, :, None], fg, background)
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_arrays(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """The corpus as 8-bit arrays ``[N, side, side, 3]`` plus integer labels."""
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for c, style in enumerate(spec.styles()):
        for _ in range(spec.images_per_class):
            img = render_image(style, spec, rng)
            images.append(np.round(img * 255).astype(np.uint8))
            labels.append(c)
    return np.stack(images), np.array(labels)


def generate_synthetic(spec: SyntheticSpec, root) -> DatasetIndex:
    """Write the corpus as PNG files plus a manifest, then index it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    images, labels = synthesize_arrays(spec)
    names = spec.class_names()
    counters = [0] * len(names)
    for img, label in zip(images, labels):
        cdir = root / names[label]
        cdir.mkdir(exist_ok=True)
        Image.fromarray(img, mode="RGB").save(cdir / f"img_{counters[label]:04d}.png",
                                              optimize=False, compress_level=6)
        counters[label] += 1
    manifest = {"generator": "rsim.synthetic", "spec": asdict(spec), "classes": names}
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return scan_directory(root)


def nearest_centroid_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Leave-one-out nearest-class-mean accuracy on raw pixels."""
    x = images.reshape(len(images), -1).astype(np.float64)
    classes = np.unique(labels)
    sums = np.stack([x[labels == c].sum(axis=0) for c in classes])
    counts = np.array([(labels == c).sum() for c in classes], dtype=np.float64)
    correct = 0
    for i in range(len(x)):
        own = int(np.searchsorted(classes, labels[i]))
        means = sums / counts[:, None]
        means[own] = (sums[own] - x[i]) / max(counts[own] - 1, 1)
        d = ((means - x[i]) ** 2).sum(axis=1)
        correct += int(classes[d.argmin()] == labels[i])
    return correct / len(x)
