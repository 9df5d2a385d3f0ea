"""Prediction, accuracy/forgetting metrics, and inner-product diagnostics.

All functions are read-only over the model, so evaluation across test sets
may run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyBatchError, UndefinedMetricError
from .nn_core import ModelBundle, forward_features
from .subspace import mask_bits

Array = np.ndarray


class AccuracyMatrix:
    """Lower-triangular record a[i, j]: accuracy on task j after task i.

    Task indices are 1-based, matching the usual a_{i,j} notation.
    """

    def __init__(self, task_count: int):
        if task_count < 1:
            raise DimensionError(f"task count must be >= 1, got {task_count}")
        self._values = np.full((task_count, task_count), np.nan)

    @property
    def task_count(self) -> int:
        return self._values.shape[0]

    def _check(self, i: int, j: int) -> None:
        if not (1 <= j <= i <= self.task_count):
            raise DimensionError(
                f"entry ({i}, {j}) outside the lower triangle of a "
                f"{self.task_count}-task matrix"
            )

    def record(self, i: int, j: int, accuracy: float) -> None:
        self._check(i, j)
        value = float(accuracy)
        if not 0.0 <= value <= 1.0:
            raise DimensionError(f"accuracy {value} outside [0, 1]")
        self._values[i - 1, j - 1] = value

    def get(self, i: int, j: int) -> float:
        self._check(i, j)
        value = self._values[i - 1, j - 1]
        if np.isnan(value):
            raise UndefinedMetricError(f"entry ({i}, {j}) has not been recorded")
        return float(value)

    def row(self, i: int) -> Array:
        """Entries a[i, 1..i]; raises if any of them is missing."""
        if not 1 <= i <= self.task_count:
            raise DimensionError(f"row {i} outside 1..{self.task_count}")
        values = self._values[i - 1, :i]
        if np.isnan(values).any():
            raise UndefinedMetricError(f"row {i} is incomplete")
        return values.copy()

    def is_complete(self) -> bool:
        lower = np.tril_indices(self.task_count)
        return not np.isnan(self._values[lower]).any()

    def as_array(self) -> Array:
        """Dense copy with NaN above the diagonal and wherever unrecorded."""
        return self._values.copy()


def predict_batch(model: ModelBundle, x_batch, accumulated_mask, seen_classes) -> Array:
    """Predicted class ids for each row of x_batch (mask-restricted logits)."""
    classes = np.asarray(sorted(int(c) for c in np.asarray(seen_classes).ravel()), dtype=np.int64)
    if classes.size == 0:
        raise EmptyBatchError("prediction needs at least one seen class")
    bits = mask_bits(accumulated_mask, model.feature_dim)
    features = forward_features(x_batch, model.extractor) * bits
    logits = features @ (model.classifier.weights[classes] * bits).T
    # argmax returns the first maximum; classes are sorted ascending, so ties
    # resolve to the lowest class id.
    return classes[np.argmax(logits, axis=1)]


def predict(model: ModelBundle, x, accumulated_mask, seen_classes) -> int:
    """Class id for a single sample under the accumulated-space rule."""
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return int(predict_batch(model, row, accumulated_mask, seen_classes)[0])


def evaluate(model: ModelBundle, accumulated_mask, test_set, seen_classes) -> float:
    """Fraction of test samples predicted correctly."""
    samples = np.asarray(test_set.samples, dtype=np.float64)
    labels = np.asarray(test_set.labels, dtype=np.int64).ravel()
    if samples.shape[0] == 0:
        raise EmptyBatchError("test set is empty")
    predicted = predict_batch(model, samples, accumulated_mask, seen_classes)
    return float(np.mean(predicted == labels))


def average_accuracy(matrix: AccuracyMatrix, i: int) -> float:
    """Mean of row i: accuracy over all tasks seen so far, after task i."""
    return float(matrix.row(i).mean())


def final_forgetting(matrix: AccuracyMatrix) -> float:
    """Mean per-task drop from peak historical accuracy to final accuracy.

    F = (1/(T-1)) * sum_{j<T} [ max_{i in [j, T-1]} a[i, j] - a[T, j] ].
    Undefined for a single task.
    """
    t = matrix.task_count
    if t < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    final_row = matrix.row(t)
    drops = []
    for j in range(1, t):
        peak = max(matrix.get(i, j) for i in range(j, t))
        drops.append(peak - final_row[j - 1])
    return float(np.mean(drops))


@dataclass(frozen=True)
class InnerProductProfile:
    """Per-dimension mean prototype-feature products, split by class group.

    ``old_profile[i]`` is the mean over samples and old-group classes of
    w[c, i] * z[i]; likewise for ``new_profile``. Summing a class profile
    over dimensions reproduces that class's mean logit exactly.
    """

    dimensions: int
    old_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    per_class: dict[int, Array]
    old_profile: Array
    new_profile: Array

    @property
    def old_mean(self) -> float:
        return float(self.old_profile.mean())

    @property
    def new_mean(self) -> float:
        return float(self.new_profile.mean())


def decomposed_inner_product(
    model: ModelBundle, samples, accumulated_mask, old_classes, new_classes
) -> InnerProductProfile:
    """Per-dimension attribution of class logits over a sample set.

    For each class the logit w_c . z decomposes into per-dimension terms
    w_i^c * z_i; this averages those terms over the samples (features
    restricted to the accumulated mask) and groups them into old-class and
    new-class prototypes.
    """
    old = tuple(int(c) for c in np.asarray(old_classes, dtype=np.int64).ravel())
    new = tuple(int(c) for c in np.asarray(new_classes, dtype=np.int64).ravel())
    if set(old) & set(new):
        raise DimensionError(f"class groups overlap: {sorted(set(old) & set(new))}")
    if not old or not new:
        raise DimensionError("both class groups must be non-empty")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatchError("profile needs a non-empty 2-D sample set")

    bits = mask_bits(accumulated_mask, model.feature_dim)
    mean_features = (forward_features(x, model.extractor) * bits).mean(axis=0)
    per_class = {
        c: (model.classifier.weights[c] * bits) * mean_features for c in (*old, *new)
    }
    old_profile = np.mean([per_class[c] for c in old], axis=0)
    new_profile = np.mean([per_class[c] for c in new], axis=0)
    return InnerProductProfile(
        dimensions=model.feature_dim,
        old_classes=old,
        new_classes=new,
        per_class=per_class,
        old_profile=old_profile,
        new_profile=new_profile,
    )
