"""Dataset ingestion (IDX container files), preprocessing, synthetic tasks
and continual task sequencing."""

from __future__ import annotations

import gzip
import pathlib
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class DataError(ValueError):
    pass


def _read_maybe_gzip(path) -> bytes:
    raw = pathlib.Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files (plain or gzipped).

    Returns (images uint8 array (n, rows, cols), labels uint8 array (n,)).
    """
    img_raw = _read_maybe_gzip(images_path)
    if len(img_raw) < 16:
        raise DataError(f"truncated IDX image file {images_path}")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad image magic {magic} in {images_path}")
    expected = 16 + n * rows * cols
    if len(img_raw) < expected:
        raise DataError(f"truncated IDX image file {images_path}")
    images = np.frombuffer(img_raw[16:expected], dtype=np.uint8).reshape(n, rows, cols)

    lbl_raw = _read_maybe_gzip(labels_path)
    if len(lbl_raw) < 8:
        raise DataError(f"truncated IDX label file {labels_path}")
    magic, n_lbl = struct.unpack(">II", lbl_raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"bad label magic {magic} in {labels_path}")
    if len(lbl_raw) < 8 + n_lbl:
        raise DataError(f"truncated IDX label file {labels_path}")
    if n_lbl != n:
        raise DataError(f"image/label count mismatch: {n} images, {n_lbl} labels")
    labels = np.frombuffer(lbl_raw[8 : 8 + n_lbl], dtype=np.uint8)
    return images, labels


def downscale_14(image) -> np.ndarray:
    """28x28 byte image -> 196-vector in [0,1] via 2x2 average pooling."""
    arr = np.asarray(image)
    if arr.size != 784:
        raise DataError(f"expected 784 pixels, got {arr.size}")
    arr = arr.reshape(28, 28).astype(np.float64)
    pooled = arr.reshape(14, 2, 14, 2).mean(axis=(1, 3))
    return (pooled / 255.0).ravel()


def flatten_28(image) -> np.ndarray:
    """28x28 byte image -> 784-vector in [0,1] (full-resolution mode)."""
    arr = np.asarray(image)
    if arr.size != 784:
        raise DataError(f"expected 784 pixels, got {arr.size}")
    return arr.astype(np.float64).ravel() / 255.0


@dataclass
class Dataset:
    """Flattened, normalized pools split into train and test."""

    train_x: np.ndarray
    train_labels: np.ndarray
    test_x: np.ndarray
    test_labels: np.ndarray
    n_classes: int = 10

    @property
    def n_features(self) -> int:
        return self.train_x.shape[1]


_IDX_NAMES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_idx(data_dir: pathlib.Path, role: str) -> pathlib.Path:
    for stem in _IDX_NAMES[role]:
        for name in (stem, stem + ".gz"):
            path = data_dir / name
            if path.exists():
                return path
    raise DataError(f"no {role} IDX file found under {data_dir}")


def load_digit_dataset(data_dir, full_resolution: bool = False) -> Dataset:
    """Load the standard 4-file IDX digit layout from `data_dir`.

    Images become 196-vectors via 14x14 downscaling, or 784-vectors when
    `full_resolution` is set.
    """
    data_dir = pathlib.Path(data_dir)
    train_imgs, train_lbls = load_idx(
        _find_idx(data_dir, "train_images"), _find_idx(data_dir, "train_labels")
    )
    test_imgs, test_lbls = load_idx(
        _find_idx(data_dir, "test_images"), _find_idx(data_dir, "test_labels")
    )
    transform = flatten_28 if full_resolution else downscale_14
    return Dataset(
        train_x=np.stack([transform(im) for im in train_imgs]),
        train_labels=train_lbls.astype(np.int64),
        test_x=np.stack([transform(im) for im in test_imgs]),
        test_labels=test_lbls.astype(np.int64),
    )


@dataclass
class Task:
    """One 2-class episode: per-class train and test pools."""

    classes: tuple[int, int]
    train_x: dict[int, np.ndarray]  # class -> (n_c, features)
    test_x: dict[int, np.ndarray]

    @property
    def n_features(self) -> int:
        return next(iter(self.train_x.values())).shape[1]


@dataclass
class RunPlan:
    seed: int
    t_cp: float
    tasks: list[tuple[int, int]]
    batch_size: int = 100
    test_batch_size: int = 300

    @property
    def all_classes(self) -> list[int]:
        return [c for pair in self.tasks for c in pair]


def make_run_plan(seed: int, t_cp: float, n_tasks: int = 3) -> RunPlan:
    """Disjoint 2-class tasks drawn uniformly without replacement from 0..9."""
    rng = np.random.default_rng(seed)
    classes = rng.permutation(10)[: 2 * n_tasks]
    tasks = [(int(classes[2 * i]), int(classes[2 * i + 1])) for i in range(n_tasks)]
    return RunPlan(seed=seed, t_cp=t_cp, tasks=tasks)


def make_task(dataset: Dataset, classes: tuple[int, int]) -> Task:
    return Task(
        classes=classes,
        train_x={c: dataset.train_x[dataset.train_labels == c] for c in classes},
        test_x={c: dataset.test_x[dataset.test_labels == c] for c in classes},
    )


def one_hot(labels, n_classes: int = 10) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def sample_batch(task: Task, size: int, rng: np.random.Generator):
    """Balanced draw, size/2 per class, without replacement within the batch.

    Returns (inputs (size, features), targets (size, 10) one-hot).
    """
    if size % 2:
        raise DataError(f"batch size must be even, got {size}")
    half = size // 2
    xs, labels = [], []
    for c in task.classes:
        pool = task.train_x[c]
        if pool.shape[0] < half:
            raise DataError(f"class {c} pool has only {pool.shape[0]} samples")
        idx = rng.choice(pool.shape[0], size=half, replace=False)
        xs.append(pool[idx])
        labels.extend([c] * half)
    order = rng.permutation(size)
    x = np.concatenate(xs)[order]
    y = one_hot(np.asarray(labels)[order])
    return x, y


def sample_test_batch(tasks: list[Task], size: int, rng: np.random.Generator):
    """Cumulative evaluation batch, balanced across every class seen so far.

    Returns (inputs, integer labels)."""
    classes = [c for t in tasks for c in t.classes]
    per_class = size // len(classes)
    xs, labels = [], []
    for task in tasks:
        for c in task.classes:
            pool = task.test_x[c]
            n = min(per_class, pool.shape[0])
            idx = rng.choice(pool.shape[0], size=n, replace=False)
            xs.append(pool[idx])
            labels.extend([c] * n)
    return np.concatenate(xs), np.asarray(labels, dtype=np.int64)


XOR_INPUTS = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
XOR_TARGETS = np.array([[0.0], [1.0], [1.0], [0.0]])


def make_xor_task():
    """Signed-XOR batch: inputs in {-1,1}^2, targets 1 where inputs differ."""
    return XOR_INPUTS.copy(), XOR_TARGETS.copy()
