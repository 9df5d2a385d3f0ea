"""Fixed-capacity replay buffer: reservoir updates, uniform retrieval.

The buffer keeps a uniform random subset of everything it has seen: after n
insertions each sample is present with probability capacity/n. Retrieval
draws without replacement. A snapshot format (4-byte version tag,
length-prefixed records) supports experiment resumption.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DimensionError, FormatError, StateError

Array = np.ndarray

SNAPSHOT_TAG = b"OCB1"


class ReplayBuffer:
    """Reservoir-sampled store of (sample, label) pairs with fixed capacity."""

    def __init__(self, capacity: int, seed: int | np.random.Generator = 0):
        if capacity < 1:
            raise DimensionError(f"capacity must be >= 1, got {capacity}")
        self._capacity = int(capacity)
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._samples: Array | None = None
        self._labels = np.zeros(self._capacity, dtype=np.int64)
        self._size = 0
        self._seen = 0

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def size(self) -> int:
        """Occupied slots: min(seen, capacity) at all times."""
        return self._size

    @property
    def seen_count(self) -> int:
        return self._seen

    def __len__(self) -> int:
        return self._size

    def _ensure_storage(self, dim: int) -> None:
        if self._samples is None:
            self._samples = np.zeros((self._capacity, dim))
        elif self._samples.shape[1] != dim:
            raise DimensionError(
                f"sample dim {dim} does not match buffered dim {self._samples.shape[1]}"
            )

    def update(self, samples, labels) -> None:
        """Reservoir-insert one batch, sample by sample.

        While below capacity every sample is stored; afterwards the sample
        arriving as number n replaces a uniformly chosen slot with
        probability capacity/n. The slot indices for a batch are drawn in
        one vectorized call, which is distribution-identical to per-sample
        draws because the running count is deterministic.
        """
        x = np.asarray(samples, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64).ravel()
        if x.ndim != 2:
            raise DimensionError(f"samples must be 2-D, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise DimensionError(f"{y.shape[0]} labels for {x.shape[0]} samples")
        if x.shape[0] == 0:
            return
        self._ensure_storage(x.shape[1])
        assert self._samples is not None

        fill = min(self._capacity - self._size, x.shape[0])
        if fill > 0:
            self._samples[self._size : self._size + fill] = x[:fill]
            self._labels[self._size : self._size + fill] = y[:fill]
            self._size += fill
            self._seen += fill
        rest = x.shape[0] - fill
        if rest > 0:
            counts = self._seen + 1 + np.arange(rest, dtype=np.int64)
            slots = self._rng.integers(0, counts)
            self._seen += rest
            for offset, slot in enumerate(slots):
                if slot < self._capacity:
                    self._samples[slot] = x[fill + offset]
                    self._labels[slot] = y[fill + offset]

    def retrieve(self, count: int) -> tuple[Array, Array]:
        """Uniform draw without replacement of min(count, size) stored pairs."""
        take = min(int(count), self._size)
        if take <= 0 or self._samples is None:
            dim = 0 if self._samples is None else self._samples.shape[1]
            return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
        chosen = self._rng.choice(self._size, size=take, replace=False)
        return self._samples[chosen].copy(), self._labels[chosen].copy()

    def contents(self) -> tuple[Array, Array]:
        """Copies of every stored sample and label, in slot order."""
        if self._samples is None:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return self._samples[: self._size].copy(), self._labels[: self._size].copy()

    def save(self, path) -> None:
        """Write a versioned binary snapshot (length-prefixed records)."""
        state = json.dumps(self._rng.bit_generator.state).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_TAG)
            dim = 0 if self._samples is None else self._samples.shape[1]
            fh.write(struct.pack(">QQQQ", self._capacity, self._seen, self._size, dim))
            fh.write(struct.pack(">I", len(state)))
            fh.write(state)
            for i in range(self._size):
                record = struct.pack(">q", int(self._labels[i])) + self._samples[i].tobytes()
                fh.write(struct.pack(">I", len(record)))
                fh.write(record)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        """Rebuild a buffer (contents and generator state) from a snapshot."""
        path = str(path)
        with open(path, "rb") as fh:
            tag = fh.read(4)
            if tag != SNAPSHOT_TAG:
                raise FormatError(
                    f"{path}: bad snapshot tag {tag!r} at offset 0 (expected {SNAPSHOT_TAG!r})"
                )
            header = fh.read(32)
            if len(header) != 32:
                raise FormatError(f"{path}: truncated header at offset 4")
            capacity, seen, size, dim = struct.unpack(">QQQQ", header)
            state_len, = struct.unpack(">I", fh.read(4))
            try:
                state = json.loads(fh.read(state_len).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: unreadable generator state ({exc})") from None
            buffer = cls(capacity)
            try:
                buffer._rng.bit_generator.state = state
            except (KeyError, TypeError, ValueError) as exc:
                raise StateError(f"{path}: incompatible generator state ({exc})") from None
            if size > 0:
                buffer._samples = np.zeros((capacity, dim))
                expected = 8 + dim * 8
                for i in range(size):
                    length_raw = fh.read(4)
                    if len(length_raw) != 4:
                        raise FormatError(f"{path}: truncated record prefix for slot {i}")
                    length, = struct.unpack(">I", length_raw)
                    if length != expected:
                        raise FormatError(
                            f"{path}: record {i} length {length} != expected {expected}"
                        )
                    record = fh.read(length)
                    if len(record) != length:
                        raise FormatError(f"{path}: truncated record {i}")
                    buffer._labels[i], = struct.unpack(">q", record[:8])
                    buffer._samples[i] = np.frombuffer(record[8:], dtype=np.float64)
            buffer._size = size
            buffer._seen = seen
        return buffer
