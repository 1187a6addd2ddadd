"""Dataset ingestion, stratified subsetting and batching.

Splits are held in memory as uint8 tensors (N x 3 x H x W); batches hand out
float pixels in [0, 1]. Three on-disk layouts are supported:

* CIFAR-10 binary: ``data_batch_{1..5}.bin`` / ``test_batch.bin``, each record
  one label byte followed by 3072 channel-major pixel bytes.
* Image folders: ``<root>/<split>/<class_name>/*.jpg`` (Intel Image).
* CSV manifest: ``<root>/train.csv`` with header ``id_code,diagnosis`` and
  images at ``<root>/images/<id_code>.png`` (APTOS 2019). An optional
  ``test.csv`` with the same header provides the test split; without it a
  stratified hold-out of the manifest is used.
"""
from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .errors import EmptyEpoch, IngestError, IntegrityError, InvalidConfig, InvalidInput

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
INTEL_CLASSES = ("buildings", "forest", "glacier", "mountain", "sea", "street")
APTOS_CLASSES = ("no_dr", "mild", "moderate", "severe", "proliferative_dr")

NUM_CLASSES = {"cifar10": 10, "intel_image": 6, "aptos2019": 5}
# full split sizes (train, test)
SPLIT_SIZES = {"cifar10": (50000, 10000), "intel_image": (14034, 3000), "aptos2019": (3263, 399)}

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class DatasetSpec:
    name: str = "synthetic_blobs"
    root_path: Optional[str] = None
    subset_size: Optional[int] = None
    test_subset_size: Optional[int] = None
    num_classes: int = 2
    image_size: int = 32
    split_seed: int = 0
    # synthetic_blobs only
    num_per_class: int = 100
    # optional {relative file path: sha256 hex}
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in (*NUM_CLASSES, "synthetic_blobs"):
            raise InvalidConfig("dataset.name", f"unknown dataset {self.name!r}")
        if self.name in NUM_CLASSES and self.num_classes != NUM_CLASSES[self.name]:
            raise InvalidConfig("dataset.num_classes",
                                f"{self.name} has {NUM_CLASSES[self.name]} classes, got {self.num_classes}")
        if self.num_classes < 2:
            raise InvalidConfig("dataset.num_classes", "need at least 2 classes")
        if self.image_size < 8:
            raise InvalidConfig("dataset.image_size", "must be >= 8")
        for key in ("subset_size", "test_subset_size"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise InvalidConfig(f"dataset.{key}", "must be positive")
        if self.name in SPLIT_SIZES:
            for key, full in zip(("subset_size", "test_subset_size"), SPLIT_SIZES[self.name]):
                value = getattr(self, key)
                if value is not None and value > full:
                    raise InvalidConfig(f"dataset.{key}", f"{value} exceeds full split size {full}")

    def resolved_root(self) -> Path:
        if self.root_path:
            return Path(self.root_path)
        env = os.environ.get("FKT_DATA_ROOT")
        if not env:
            raise InvalidConfig("dataset.root_path", "not set and FKT_DATA_ROOT is undefined")
        return Path(env) / self.name


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # N x 3 x H x W float in [0, 1] (or normalised after transforms)
    labels: torch.Tensor  # N, int64
    sample_ids: torch.Tensor  # N, int64

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Split:
    images: torch.Tensor  # N x 3 x H x W uint8
    labels: torch.Tensor
    sample_ids: torch.Tensor
    class_names: tuple
    # per-sample extras, e.g. blob bounding boxes for synthetic data
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, index) -> "Split":
        index = torch.as_tensor(index, dtype=torch.long)
        meta = {k: v[index] for k, v in self.meta.items()}
        return Split(self.images[index], self.labels[index], self.sample_ids[index], self.class_names, meta)

    def batch(self, index=None) -> ImageBatch:
        part = self if index is None else self.subset(index)
        return ImageBatch(part.images.float() / 255.0, part.labels.clone(), part.sample_ids.clone())

    def select_ids(self, sample_ids) -> "Split":
        lookup = {int(s): i for i, s in enumerate(self.sample_ids.tolist())}
        try:
            return self.subset([lookup[int(s)] for s in sample_ids])
        except KeyError as exc:
            raise InvalidInput(f"sample id {exc.args[0]} not in split") from None


# ---------------------------------------------------------------- subsetting

def stratified_counts(class_counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` across classes."""
    class_counts = np.asarray(class_counts, dtype=np.int64)
    if total > class_counts.sum():
        raise InvalidInput(f"subset of {total} exceeds {class_counts.sum()} samples")
    exact = class_counts * total / class_counts.sum()
    counts = np.floor(exact).astype(np.int64)
    remainder = total - counts.sum()
    # ties broken by class index for determinism
    order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
    counts[order[:remainder]] += 1
    return np.minimum(counts, class_counts)


def stratified_subset(split: Split, size: int, seed: int) -> Split:
    """Seeded sample of ``size`` items preserving class proportions."""
    if size >= len(split):
        return split
    labels = split.labels.numpy()
    classes = np.arange(len(split.class_names))
    per_class = stratified_counts(np.array([(labels == c).sum() for c in classes]), size)
    rng = np.random.default_rng(seed)
    chosen = []
    for c, k in zip(classes, per_class):
        members = np.flatnonzero(labels == c)
        chosen.append(rng.choice(members, size=k, replace=False))
    index = np.sort(np.concatenate(chosen))
    return split.subset(index)


def stratified_holdout(labels: np.ndarray, holdout: int, seed: int) -> tuple:
    """Indices (keep, held_out) with ``holdout`` items drawn per class proportion."""
    classes = np.unique(labels)
    per_class = stratified_counts(np.array([(labels == c).sum() for c in classes]), holdout)
    rng = np.random.default_rng(seed)
    held = []
    for c, k in zip(classes, per_class):
        held.append(rng.choice(np.flatnonzero(labels == c), size=k, replace=False))
    held = np.sort(np.concatenate(held))
    keep = np.setdiff1d(np.arange(len(labels)), held)
    return keep, held


# ---------------------------------------------------------------- ingestion

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify_checksums(root: Path, checksums: dict):
    for rel, expected in checksums.items():
        path = root / rel
        if not path.exists():
            raise IngestError(f"missing file {path}")
        actual = _sha256(path)
        if actual != expected.lower():
            raise IntegrityError(f"checksum mismatch for {path}: expected {expected}, got {actual}")


def read_cifar_binary(path: Path) -> tuple:
    """Parse one CIFAR-10 binary file into (uint8 images N x 3 x 32 x 32, int64 labels)."""
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise IngestError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}-byte records")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise IngestError(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar_binary(path: Path, images: np.ndarray, labels: np.ndarray):
    """Inverse of ``read_cifar_binary``; used to build fixtures."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    records.tofile(path)


def _load_cifar(root: Path) -> tuple:
    splits = []
    offset = 0
    for files in (CIFAR_TRAIN_FILES, CIFAR_TEST_FILES):
        parts = []
        for name in files:
            path = root / name
            if not path.exists():
                raise IngestError(f"missing CIFAR-10 file {path}")
            parts.append(read_cifar_binary(path))
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        ids = np.arange(offset, offset + len(labels))
        offset += len(labels)
        splits.append(Split(torch.from_numpy(images.copy()), torch.from_numpy(labels),
                            torch.from_numpy(ids), CIFAR10_CLASSES))
    return tuple(splits)


def _decode_image(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot decode image {path}: {exc}") from exc


def _load_image_folder(root: Path, split_name: str, classes: tuple, size: int, id_offset: int) -> Split:
    split_dir = root / split_name
    if not split_dir.is_dir():
        raise IngestError(f"missing split directory {split_dir}")
    images, labels = [], []
    for label, cls in enumerate(classes):
        class_dir = split_dir / cls
        if not class_dir.is_dir():
            raise IngestError(f"missing class directory {class_dir}")
        for path in sorted(class_dir.glob("*.jpg")):
            images.append(_decode_image(path, size))
            labels.append(label)
    if not images:
        raise IngestError(f"no images found under {split_dir}")
    ids = np.arange(id_offset, id_offset + len(labels))
    return Split(torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long),
                 torch.from_numpy(ids), classes)


def _read_manifest(path: Path) -> list:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"id_code", "diagnosis"} <= set(reader.fieldnames):
                raise IngestError(f"{path}: header must contain id_code,diagnosis")
            rows = [(r["id_code"], int(r["diagnosis"])) for r in reader]
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise IngestError(f"{path}: bad diagnosis value: {exc}") from exc
    for id_code, grade in rows:
        if not 0 <= grade < 5:
            raise IngestError(f"{path}: diagnosis {grade} for {id_code} outside 0-4")
    return rows


def _manifest_split(root: Path, rows: list, size: int, id_offset: int) -> Split:
    images = [_decode_image(root / "images" / f"{id_code}.png", size) for id_code, _ in rows]
    labels = torch.tensor([g for _, g in rows], dtype=torch.long)
    ids = torch.arange(id_offset, id_offset + len(rows))
    return Split(torch.from_numpy(np.stack(images)), labels, ids, APTOS_CLASSES)


def _load_aptos(root: Path, size: int, seed: int) -> tuple:
    train_rows = _read_manifest(root / "train.csv")
    if (root / "test.csv").exists():
        test_rows = _read_manifest(root / "test.csv")
    else:
        full_train, full_test = SPLIT_SIZES["aptos2019"]
        holdout = round(len(train_rows) * full_test / (full_train + full_test))
        keep, held = stratified_holdout(np.array([g for _, g in train_rows]), holdout, seed)
        test_rows = [train_rows[i] for i in held]
        train_rows = [train_rows[i] for i in keep]
    train = _manifest_split(root, train_rows, size, 0)
    test = _manifest_split(root, test_rows, size, len(train_rows))
    return train, test


def load_dataset(spec: DatasetSpec) -> tuple:
    """Return ``(train, test)`` splits for ``spec``, subset if requested.

    Source files are only read. Sample ids are positions in the full
    concatenated (train then test) listing, so they stay stable under
    subsetting.
    """
    if spec.name == "synthetic_blobs":
        train, test = make_synthetic_blobs(spec.num_per_class, spec.num_classes, spec.image_size, spec.split_seed)
    else:
        root = spec.resolved_root()
        if not root.is_dir():
            raise IngestError(f"dataset root {root} does not exist")
        _verify_checksums(root, spec.checksums)
        if spec.name == "cifar10":
            train, test = _load_cifar(root)
        elif spec.name == "intel_image":
            train = _load_image_folder(root, "train", INTEL_CLASSES, spec.image_size, 0)
            test = _load_image_folder(root, "test", INTEL_CLASSES, spec.image_size, len(train))
        else:
            train, test = _load_aptos(root, spec.image_size, spec.split_seed)
    if spec.subset_size is not None:
        train = stratified_subset(train, spec.subset_size, spec.split_seed)
    if spec.test_subset_size is not None:
        test = stratified_subset(test, spec.test_subset_size, spec.split_seed + 1)
    return train, test


# ---------------------------------------------------------------- synthetic data

BLOB_COLORS = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.9], [0.9, 0.8, 0.1],
    [0.8, 0.1, 0.8], [0.1, 0.8, 0.8], [0.95, 0.5, 0.1], [0.5, 0.5, 0.5],
])


def make_synthetic_blobs(num_per_class: int, num_classes: int, image_size: int = 32, seed: int = 0) -> tuple:
    """Coloured Gaussian blobs on a noisy grey background, 80/20 train/test.

    Each class has its own blob colour; blob centres are drawn uniformly per
    image so that class identity lives in colour, not position. The
    ``bbox`` meta entry holds ``(row0, col0, row1, col1)`` (exclusive ends)
    covering two standard deviations around each blob centre.
    """
    if num_classes < 2:
        raise InvalidInput("num_classes must be >= 2")
    if num_per_class < 5:
        raise InvalidInput("num_per_class must be >= 5 for an 80/20 split")
    if image_size < 8:
        raise InvalidInput("image_size must be >= 8")
    rng = np.random.default_rng(seed)
    if num_classes <= len(BLOB_COLORS):
        colors = BLOB_COLORS[:num_classes]
    else:
        colors = rng.uniform(0.1, 0.9, size=(num_classes, 3))

    sigma = image_size / 8
    margin = 2 * sigma
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    n = num_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), num_per_class)
    centres = rng.uniform(margin, image_size - 1 - margin, size=(n, 2))
    background = np.clip(0.5 + 0.12 * rng.standard_normal((n, 3, image_size, image_size)), 0, 1)

    images = np.empty((n, 3, image_size, image_size), dtype=np.uint8)
    bboxes = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        cy, cx = centres[i]
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = background[i] * (1 - weight) + colors[labels[i]][:, None, None] * weight
        images[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        bboxes[i] = [max(0, int(np.floor(cy - 2 * sigma))), max(0, int(np.floor(cx - 2 * sigma))),
                     min(image_size, int(np.ceil(cy + 2 * sigma)) + 1),
                     min(image_size, int(np.ceil(cx + 2 * sigma)) + 1)]

    keep, held = stratified_holdout(labels, n // 5, seed)
    names = tuple(f"blob_{c}" for c in range(num_classes))
    full = Split(torch.from_numpy(images), torch.from_numpy(labels), torch.arange(n), names,
                 {"bbox": torch.from_numpy(bboxes)})
    return full.subset(keep), full.subset(held)


# ---------------------------------------------------------------- batching

def epoch_permutation(n: int, shuffle_seed: Optional[int], epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iterator(split: Split, batch_size: int, shuffle_seed: Optional[int] = None,
                   drop_last: bool = False, epoch: int = 0) -> Iterator[ImageBatch]:
    """Yield batches in an order fixed by ``(shuffle_seed, epoch)``.

    ``shuffle_seed=None`` keeps the split's own order.
    """
    if batch_size < 1:
        raise InvalidInput("batch_size must be >= 1")
    n = len(split)
    if drop_last and batch_size > n:
        raise EmptyEpoch(f"batch_size {batch_size} exceeds split size {n} with drop_last")
    order = epoch_permutation(n, shuffle_seed, epoch)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield split.batch(order[start:start + batch_size])


def num_batches(n: int, batch_size: int, drop_last: bool) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def channel_stats(split: Split) -> tuple:
    """Per-channel mean and std of a split's pixels in [0, 1]."""
    pixels = split.images.double() / 255.0
    mean = pixels.mean(dim=(0, 2, 3))
    std = pixels.std(dim=(0, 2, 3), unbiased=False)
    return tuple(round(v, 6) for v in mean.tolist()), tuple(round(max(v, 1e-6), 6) for v in std.tolist())
