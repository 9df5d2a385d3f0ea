"""Dataset ingestion (IDX, CSV, synthetic Gaussians) and task streaming.

Datasets are immutable after load: float64 sample matrices scaled to [0, 1]
with integer class labels. A task sequence carves one dataset into
disjoint-class tasks after a single seeded class shuffle; batch streams
yield every task sample exactly once in a seeded order.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

Array = np.ndarray

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Sample matrix (N x in_dim, values in [0, 1]) with integer labels."""

    samples: Array
    labels: Array
    class_count: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        if samples.ndim != 2:
            raise DimensionError(f"samples must be 2-D, got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise FormatError("a dataset needs at least one sample")
        if labels.shape[0] != samples.shape[0]:
            raise DimensionError(
                f"{labels.shape[0]} labels for {samples.shape[0]} samples"
            )
        if not np.isfinite(samples).all():
            raise FormatError("samples contain non-finite values")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise FormatError("sample values must lie in [0, 1]")
        if self.class_count < 1 or labels.min() < 0 or labels.max() >= self.class_count:
            raise FormatError(
                f"labels must lie in [0, {self.class_count}); got "
                f"[{int(labels.min())}, {int(labels.max())}]"
            )

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Task:
    """One task of a sequence: the samples whose labels fall in its classes."""

    task_id: int
    classes: tuple[int, ...]
    samples: Array
    labels: Array

    @property
    def size(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class TaskSequence:
    """Ordered disjoint-class tasks carved from one labeled dataset."""

    tasks: tuple[Task, ...]
    class_map: tuple[tuple[int, ...], ...]
    classes_per_task: int
    class_count: int
    input_dim: int

    @property
    def task_count(self) -> int:
        return len(self.tasks)


@dataclass
class BatchStream:
    """Single-pass mini-batch view of one task (seeded permutation order)."""

    task: Task
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")

    @property
    def task_id(self) -> int:
        return self.task.task_id

    def __iter__(self):
        order = np.random.default_rng(self.seed).permutation(self.task.size)
        for start in range(0, self.task.size, self.batch_size):
            chunk = order[start : start + self.batch_size]
            yield self.task.samples[chunk], self.task.labels[chunk]


def _read_exact(handle, count: int, path: str, offset: int, what: str) -> bytes:
    data = handle.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated while reading {what} at offset {offset} "
            f"(wanted {count} bytes, got {len(data)})"
        )
    return data


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, u8 pixels / 255)."""
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, images_path, 0, "magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        count, rows, cols = struct.unpack(
            ">III", _read_exact(fh, 12, images_path, 4, "image dimensions")
        )
        pixel_bytes = count * rows * cols
        raw = _read_exact(fh, pixel_bytes, images_path, 16, "pixel data")
        if fh.read(1):
            raise FormatError(f"{images_path}: trailing bytes after offset {16 + pixel_bytes}")
    with open(labels_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, labels_path, 0, "magic"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        label_count, = struct.unpack(">I", _read_exact(fh, 4, labels_path, 4, "label count"))
        if label_count != count:
            raise FormatError(
                f"{labels_path}: label count {label_count} at offset 4 does not "
                f"match image count {count}"
            )
        labels_raw = _read_exact(fh, label_count, labels_path, 8, "label data")
    if count == 0:
        raise FormatError(f"{images_path}: image count at offset 4 is zero")

    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(np.int64)
    samples = pixels.astype(np.float64) / 255.0
    return LabeledDataset(samples, labels, class_count=int(labels.max()) + 1)


def load_csv(path) -> LabeledDataset:
    """Load a headered CSV (float feature columns, final integer label column).

    Feature values are rescaled to [0, 1] by one global affine map.
    """
    path = str(path)
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        width = len(header)
        if width < 2:
            raise FormatError(f"{path}: need at least one feature column plus a label column")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(
                    f"{path}: line {line_no} has {len(row)} fields, expected {width}"
                )
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise FormatError(f"{path}: line {line_no}: bad feature value ({exc})") from None
            try:
                labels.append(int(row[-1]))
            except ValueError:
                raise FormatError(
                    f"{path}: line {line_no}: label {row[-1]!r} is not an integer"
                ) from None
    if not rows:
        raise FormatError(f"{path}: no data rows after the header")
    samples = rescale_unit(np.asarray(rows, dtype=np.float64))
    label_arr = np.asarray(labels, dtype=np.int64)
    if label_arr.min() < 0:
        raise FormatError(f"{path}: negative label {int(label_arr.min())}")
    return LabeledDataset(samples, label_arr, class_count=int(label_arr.max()) + 1)


def rescale_unit(values: Array) -> Array:
    """Affine map of the whole matrix onto [0, 1]; constant input maps to 0."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def synth_gaussian(
    class_count: int, in_dim: int, per_class: int, separation: float, seed: int
) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, rescaled to [0, 1].

    Class c is centered at ``separation`` times a seeded random unit
    direction; noise is unit isotropic. separation=0 makes every class
    indistinguishable.
    """
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if in_dim < 1:
        raise ConfigError(f"in_dim must be >= 1, got {in_dim}")
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(class_count):
        direction = rng.standard_normal(in_dim)
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 0 else np.eye(in_dim)[0]
        noise = rng.standard_normal((per_class, in_dim))
        blocks.append(float(separation) * direction + noise)
    samples = rescale_unit(np.vstack(blocks))
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    return LabeledDataset(samples, labels, class_count)


def train_test_split(
    dataset: LabeledDataset, test_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split; every class keeps at least one training sample."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        take = min(int(round(test_fraction * members.size)), members.size - 1)
        test_idx.append(members[:take])
        train_idx.append(members[take:])
    train = np.sort(np.concatenate(train_idx))
    test_parts = [part for part in test_idx if part.size]
    if not test_parts:
        raise ConfigError("test_fraction too small: the test split came out empty")
    test = np.sort(np.concatenate(test_parts))
    return dataset.subset(train), dataset.subset(test)


def split_tasks(dataset: LabeledDataset, task_count: int, shuffle_seed: int) -> TaskSequence:
    """Shuffle all classes once, then assign them to tasks contiguously."""
    t = int(task_count)
    if t < 1:
        raise ConfigError(f"task count must be >= 1, got {t}")
    if dataset.class_count % t != 0:
        raise ConfigError(
            f"class count {dataset.class_count} is not divisible by {t} tasks"
        )
    per_task = dataset.class_count // t
    shuffled = np.random.default_rng(shuffle_seed).permutation(dataset.class_count)
    class_map = tuple(
        tuple(int(c) for c in shuffled[i * per_task : (i + 1) * per_task]) for i in range(t)
    )
    tasks = []
    for i, classes in enumerate(class_map, start=1):
        member = np.isin(dataset.labels, classes)
        tasks.append(
            Task(
                task_id=i,
                classes=classes,
                samples=dataset.samples[member],
                labels=dataset.labels[member],
            )
        )
    return TaskSequence(
        tasks=tuple(tasks),
        class_map=class_map,
        classes_per_task=per_task,
        class_count=dataset.class_count,
        input_dim=dataset.input_dim,
    )


def stream_batches(task: Task, batch_size: int, seed: int) -> BatchStream:
    """Single-pass stream over one task in a seeded permutation order."""
    return BatchStream(task=task, batch_size=batch_size, seed=seed)
