"""Image dataset storage, synthetic data generation and episode sampling.

Datasets live in a flat binary format ("FSDS") holding uint8 pixels in
class-major order.  A split manifest assigns disjoint class sets to
train/val/test.  Episodes are N-way K-shot tasks: per class, K support
images plus a fixed number of query images, drawn without replacement
and disjoint, with labels remapped to 0..N-1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import PortableRng, derive_seed, fnv1a64

DATASET_MAGIC = b"FSDS"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


class TrailingDataError(DatasetFormatError):
    pass


class ManifestError(ValueError):
    """Malformed or inconsistent split manifest."""


@dataclass
class DatasetStore:
    """Immutable pixel store: (num_classes, samples_per_class, c, h, w) uint8."""

    num_classes: int
    samples_per_class: int
    channels: int
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        expected = (self.num_classes, self.samples_per_class,
                    self.channels, self.height, self.width)
        if self.pixels.shape != expected:
            raise ValueError(f"pixel buffer shape {self.pixels.shape} != header {expected}")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    def images(self, class_idx: int, sample_indices) -> np.ndarray:
        """Selected images of one class as float64 in [0, 1]."""
        return self.pixels[class_idx, sample_indices].astype(np.float64) / 255.0

    def class_pixel_means(self) -> np.ndarray:
        return self.pixels.reshape(self.num_classes, -1).mean(axis=1)


@dataclass(frozen=True)
class SplitManifest:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ManifestError("train/val/test class sets are not disjoint")
        if any(c < 0 for s in sets for c in s):
            raise ManifestError("negative class index in manifest")

    def classes_for(self, split: str) -> tuple[int, ...]:
        try:
            return {"train": self.train_classes, "val": self.val_classes,
                    "test": self.test_classes}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None

    def validate_against(self, store: DatasetStore) -> None:
        top = max(self.train_classes + self.val_classes + self.test_classes)
        if top >= store.num_classes:
            raise ManifestError(f"manifest references class {top}, "
                                f"dataset has {store.num_classes} classes")


@dataclass
class Episode:
    """One N-way K-shot task with local labels 0..N-1.

    Support images are grouped per class; query images are class-major with
    ``queries_per_class`` items per class.  Global class ids and the sample
    indices drawn for support/query are kept for reproducibility checks.
    """

    n_way: int
    k_shot: int
    queries_per_class: int
    class_ids: np.ndarray          # (N,) global class indices
    support_images: np.ndarray     # (N, K, c, h, w) float64 in [0, 1]
    query_images: np.ndarray       # (M, c, h, w) float64 in [0, 1]
    query_labels: np.ndarray       # (M,) int local labels
    support_indices: np.ndarray    # (N, K) sample indices within class
    query_indices: np.ndarray      # (N, queries_per_class)

    @property
    def m_query(self) -> int:
        return self.n_way * self.queries_per_class


# ---------------------------------------------------------------------------
# binary dataset format


def write_dataset(path: str, store: DatasetStore) -> None:
    header = DATASET_MAGIC + struct.pack(
        "<HIIHHH", DATASET_VERSION, store.num_classes, store.samples_per_class,
        store.channels, store.height, store.width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(store.pixels.tobytes())


def load_dataset(path: str) -> DatasetStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(raw) < 20:
        raise TruncatedDatasetError(f"file has {len(raw)} bytes, header needs 20")
    version, nc, spc, ch, h, w = struct.unpack_from("<HIIHHH", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    n_pixels = nc * spc * ch * h * w
    if len(raw) - 20 < n_pixels:
        raise TruncatedDatasetError(
            f"header declares {n_pixels} pixel bytes, file holds {len(raw) - 20}")
    if len(raw) - 20 > n_pixels:
        raise TrailingDataError(
            f"{len(raw) - 20 - n_pixels} trailing bytes beyond declared pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=20).reshape(nc, spc, ch, h, w).copy()
    return DatasetStore(nc, spc, ch, h, w, pixels)


# ---------------------------------------------------------------------------
# split manifest: three text lines "train: 0,1,..." / "val: ..." / "test: ..."


def save_manifest(path: str, manifest: SplitManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, classes in (("train", manifest.train_classes),
                              ("val", manifest.val_classes),
                              ("test", manifest.test_classes)):
            fh.write(f"{name}: {','.join(str(c) for c in classes)}\n")


def load_manifest(path: str) -> SplitManifest:
    splits: dict[str, tuple[int, ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            key = key.strip()
            if key not in ("train", "val", "test"):
                raise ManifestError(f"unexpected manifest line {line!r}")
            if key in splits:
                raise ManifestError(f"duplicate {key!r} line in manifest")
            items = tuple(int(tok) for tok in rest.split(",") if tok.strip() != "")
            splits[key] = items
    missing = {"train", "val", "test"} - set(splits)
    if missing:
        raise ManifestError(f"manifest missing sections: {sorted(missing)}")
    return SplitManifest(splits["train"], splits["val"], splits["test"])


def proportional_split(num_classes: int, fractions=(0.6, 0.2, 0.2)) -> SplitManifest:
    """Contiguous train/val/test split by class index, default 60/20/20."""
    n_train = int(round(num_classes * fractions[0]))
    n_val = int(round(num_classes * fractions[1]))
    return SplitManifest(tuple(range(n_train)),
                         tuple(range(n_train, n_train + n_val)),
                         tuple(range(n_train + n_val, num_classes)))


# ---------------------------------------------------------------------------
# synthetic dataset

_GOLDEN = 0.6180339887498949
_PLASTIC = 0.7548776662466927
_PLASTIC2 = 0.5698402909980532


def _class_pattern_params(class_idx: int) -> tuple[float, float, float, float, float]:
    """Deterministic per-class pattern: stripe angle/frequency and blob geometry."""
    theta = np.pi * ((class_idx * _GOLDEN) % 1.0)
    freq = 2.0 + 1.25 * (class_idx % 4)
    bx = 0.22 + 0.56 * ((class_idx * _PLASTIC + 0.123) % 1.0)
    by = 0.22 + 0.56 * ((class_idx * _PLASTIC2 + 0.321) % 1.0)
    radius = 0.12 + 0.06 * ((class_idx * 0.37) % 1.0)
    return theta, freq, bx, by, radius


def generate_synthetic(num_classes: int, samples_per_class: int, size: int,
                       seed: int, channels: int = 1) -> DatasetStore:
    """Procedural dataset of oriented stripes plus a class-specific blob.

    Each class is a fixed sinusoidal grating (angle and frequency indexed by
    the class) overlaid with a Gaussian blob at a class-specific position.
    Per-sample jitter: sub-pixel translation in [-2, 2] px, a fresh stripe
    phase, and additive Gaussian noise with sigma 0.05 of the value range.
    Everything derives from ``seed``, so generation is bit-reproducible.
    """
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    if num_classes < 10:
        raise ValueError(f"need at least 10 classes, got {num_classes}")
    if samples_per_class < 1 or channels < 1:
        raise ValueError("samples_per_class and channels must be positive")

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    pixels = np.empty((num_classes, samples_per_class, channels, size, size), dtype=np.uint8)

    for c in range(num_classes):
        theta, freq, bx, by, radius = _class_pattern_params(c)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        for s in range(samples_per_class):
            rng = PortableRng(derive_seed(seed, f"synthetic/{c}/{s}"))
            dx = rng.uniform(-2.0, 2.0) / size
            dy = rng.uniform(-2.0, 2.0) / size
            phase = rng.uniform(0.0, 2.0 * np.pi)
            u = xx - dx
            v = yy - dy
            stripes = np.sin(2.0 * np.pi * freq * (u * cos_t + v * sin_t) + phase)
            blob = np.exp(-((u - bx) ** 2 + (v - by) ** 2) / (2.0 * radius ** 2))
            base = 0.45 + 0.28 * stripes + 0.34 * blob
            for ch in range(channels):
                noisy = base + rng.fill_normal((size, size), sigma=0.05)
                pixels[c, s, ch] = np.clip(np.rint(noisy * 255.0), 0, 255).astype(np.uint8)

    return DatasetStore(num_classes, samples_per_class, channels, size, size, pixels)


# ---------------------------------------------------------------------------
# episode sampling


def sample_episode(store: DatasetStore, manifest: SplitManifest, split: str,
                   n_way: int, k_shot: int, queries_per_class: int,
                   rng: PortableRng) -> Episode:
    """Draw one N-way K-shot episode from the given split.

    Classes are drawn without replacement from the split (sorted order, so
    the stream is independent of manifest line order); per class, K support
    and ``queries_per_class`` query samples are drawn without replacement
    and are disjoint.  Local labels follow the class draw order.
    """
    classes = sorted(manifest.classes_for(split))
    if len(classes) < n_way:
        raise ValueError(f"split {split!r} has {len(classes)} classes, need {n_way}")
    per_class = k_shot + queries_per_class
    if store.samples_per_class < per_class:
        raise ValueError(f"classes hold {store.samples_per_class} samples, "
                         f"need {per_class} (K={k_shot} + {queries_per_class} queries)")

    picked = [classes[i] for i in rng.sample_without_replacement(len(classes), n_way)]
    support = np.empty((n_way, k_shot, store.channels, store.height, store.width))
    queries = np.empty((n_way * queries_per_class, store.channels, store.height, store.width))
    sup_idx = np.empty((n_way, k_shot), dtype=np.int64)
    qry_idx = np.empty((n_way, queries_per_class), dtype=np.int64)
    labels = np.repeat(np.arange(n_way), queries_per_class)

    for local, cls in enumerate(picked):
        drawn = rng.sample_without_replacement(store.samples_per_class, per_class)
        sup_idx[local] = drawn[:k_shot]
        qry_idx[local] = drawn[k_shot:]
        support[local] = store.images(cls, sup_idx[local])
        queries[local * queries_per_class:(local + 1) * queries_per_class] = \
            store.images(cls, qry_idx[local])

    return Episode(n_way=n_way, k_shot=k_shot, queries_per_class=queries_per_class,
                   class_ids=np.asarray(picked, dtype=np.int64),
                   support_images=support, query_images=queries, query_labels=labels,
                   support_indices=sup_idx, query_indices=qry_idx)


def episode_hash(episode: Episode, running: int | None = None) -> int:
    """FNV-1a hash of the episode's identity (classes and drawn indices).

    Pass the previous value as ``running`` to hash a whole episode stream.
    """
    payload = (episode.class_ids.astype("<i8").tobytes()
               + episode.support_indices.astype("<i8").tobytes()
               + episode.query_indices.astype("<i8").tobytes())
    if running is not None:
        payload = running.to_bytes(8, "little") + payload
    return fnv1a64(payload)
