"""Feature-subspace masks: blank allocation, variance-based reuse, union.

A subspace mask selects the k feature dimensions one task trains in; the
accumulated mask is the running union of every subspace assigned so far and
is what replay and prediction use. Masks are immutable value types.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NoBlankSubspaceError

Array = np.ndarray


def _freeze(bits) -> Array:
    arr = np.asarray(bits, dtype=bool).ravel().copy()
    arr.setflags(write=False)
    return arr


def mask_bits(mask, feature_dim: int | None = None) -> Array:
    """Boolean bit vector of a mask object or array, with optional length check."""
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool).ravel()
    if feature_dim is not None and bits.shape[0] != feature_dim:
        raise DimensionError(
            f"mask length {bits.shape[0]} does not match feature dim {feature_dim}"
        )
    return bits


@dataclass(frozen=True)
class SubspaceMask:
    """The k-dimensional feature slice assigned to one task."""

    bits: Array
    task_id: int

    def __post_init__(self):
        object.__setattr__(self, "bits", _freeze(self.bits))
        if self.size < 1:
            raise ConfigError("a subspace mask must select at least one dimension")

    @property
    def size(self) -> int:
        return int(self.bits.sum())

    @property
    def feature_dim(self) -> int:
        return self.bits.shape[0]

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass(frozen=True)
class AccumulatedMask:
    """Union of every subspace assigned so far; grows monotonically."""

    bits: Array

    def __post_init__(self):
        object.__setattr__(self, "bits", _freeze(self.bits))

    @classmethod
    def empty(cls, feature_dim: int) -> "AccumulatedMask":
        return cls(np.zeros(feature_dim, dtype=bool))

    @classmethod
    def full(cls, feature_dim: int) -> "AccumulatedMask":
        return cls(np.ones(feature_dim, dtype=bool))

    @property
    def size(self) -> int:
        return int(self.bits.sum())

    @property
    def feature_dim(self) -> int:
        return self.bits.shape[0]

    def contains(self, mask) -> bool:
        other = mask_bits(mask, self.feature_dim)
        return not np.any(other & ~self.bits)

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


def blank_subspace(task_id: int, subspace_size: int, feature_dim: int) -> SubspaceMask:
    """Contiguous untouched slice [(t-1)*k, t*k) for 1-based task t."""
    t, k, d = int(task_id), int(subspace_size), int(feature_dim)
    if t < 1 or k < 1 or d < 1:
        raise ConfigError("task id, subspace size and feature dim must be positive")
    if t * k > d:
        raise NoBlankSubspaceError(
            f"task {t} with subspace size {k} exceeds the {d}-dim feature space; "
            "select a reuse subspace instead"
        )
    bits = np.zeros(d, dtype=bool)
    bits[(t - 1) * k : t * k] = True
    return SubspaceMask(bits, task_id=t)


def reuse_subspace(
    classifier_weights, subspace_size: int, seen_classes, task_id: int = -1
) -> SubspaceMask:
    """Pick the k feature dimensions whose prototype-weight variance is smallest.

    Variance is taken per dimension over the rows of ``classifier_weights``
    indexed by ``seen_classes`` (population variance; only the ordering
    matters). Ties break toward the lower dimension index.
    """
    w = np.asarray(classifier_weights, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"classifier weights must be 2-D, got shape {w.shape}")
    k, d = int(subspace_size), w.shape[1]
    if k < 1 or k > d:
        raise ConfigError(f"subspace size {k} outside [1, {d}]")
    classes = np.asarray(seen_classes, dtype=np.int64).ravel()
    if classes.size < 2:
        raise ConfigError("reuse selection needs at least two seen classes")
    if classes.min() < 0 or classes.max() >= w.shape[0]:
        raise ConfigError("seen_classes index outside the classifier rows")

    variances = w[classes].var(axis=0)
    chosen = np.argsort(variances, kind="stable")[:k]
    bits = np.zeros(d, dtype=bool)
    bits[chosen] = True
    return SubspaceMask(bits, task_id=int(task_id))


def accumulate(previous: AccumulatedMask, current: SubspaceMask) -> AccumulatedMask:
    """Bitwise union; with blank allocation only this is the prefix [0, t*k)."""
    prev = mask_bits(previous)
    cur = mask_bits(current, prev.shape[0])
    return AccumulatedMask(prev | cur)


def apply_mask(values, mask):
    """Copy with entries at false bits zeroed; accepts a vector or a matrix."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DimensionError(f"expected a vector or matrix, got shape {arr.shape}")
    bits = mask_bits(mask, arr.shape[-1])
    return arr * bits
