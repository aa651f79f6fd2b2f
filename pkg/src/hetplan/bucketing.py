"""Length histograms and padding-optimal bucket boundaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .workload import WorkloadSpec, draw_lengths

DEFAULT_STEP = 256
DEFAULT_R = 16
DEFAULT_MULTIPLIER = 100


class BucketingError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryGrid:
    """Pre-defined boundaries ``u_1 < ... < u_U``; interval ``i`` is
    ``(u_{i-1}, u_i]`` with ``u_0 = 0``."""

    u: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.u:
            raise BucketingError("grid needs at least one boundary")
        if self.u[0] < 1 or any(b <= a for a, b in zip(self.u, self.u[1:])):
            raise BucketingError("grid boundaries must be positive and strictly increasing")

    @classmethod
    def uniform(cls, max_len: int, step: int = DEFAULT_STEP) -> "BoundaryGrid":
        if step < 1 or max_len < 1:
            raise BucketingError("grid step and max length must be positive")
        top = -(-max_len // step) * step
        return cls(tuple(range(step, top + 1, step)))

    @property
    def max_len(self) -> int:
        return self.u[-1]

    def __len__(self) -> int:
        return len(self.u)


@dataclass(frozen=True)
class IntervalHistogram:
    grid: BoundaryGrid
    counts: tuple[int, ...]
    length_sum: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts)

    def intra_padding(self) -> int:
        """Padding that remains even with a boundary at every grid point."""
        return sum(c * u for c, u in zip(self.counts, self.grid.u)) - self.length_sum


@dataclass(frozen=True)
class Bucketing:
    boundaries: tuple[int, ...]
    cross_padding: int | None = field(default=None, compare=False)
    total_padding: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.boundaries:
            raise BucketingError("bucketing needs at least one boundary")
        if self.boundaries[0] < 1 or any(
            b <= a for a, b in zip(self.boundaries, self.boundaries[1:])
        ):
            raise BucketingError("bucket boundaries must be positive and strictly increasing")

    @property
    def R(self) -> int:
        return len(self.boundaries)

    def bucket_of(self, lengths: Sequence[int] | np.ndarray) -> np.ndarray:
        arr = np.asarray(lengths, dtype=np.int64)
        idx = np.searchsorted(np.asarray(self.boundaries), arr, side="left")
        if arr.size and (idx.max() >= self.R or arr.min() < 1):
            raise BucketingError("sequence exceeds last bucket boundary")
        return idx

    def format(self) -> str:
        return ",".join(str(b) for b in self.boundaries)

    @classmethod
    def parse(cls, text: str) -> "Bucketing":
        try:
            return cls(tuple(int(x) for x in text.replace(" ", "").split(",") if x))
        except ValueError as exc:
            raise BucketingError(f"bad boundary list {text!r}: {exc}") from None


@dataclass(frozen=True)
class BatchHistogram:
    """Per-bucket sequence counts ``B_j`` and, optionally, fractions ``f_j``."""

    boundaries: tuple[int, ...]
    counts: tuple[int, ...]
    fractions: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.counts) != len(self.boundaries):
            raise BucketingError("one count per bucket required")
        if any(c < 0 for c in self.counts):
            raise BucketingError("bucket counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def R(self) -> int:
        return len(self.boundaries)

    def longest_occupied(self) -> int:
        """1-based index of the last non-empty bucket (0 if all empty)."""
        for j in range(len(self.counts), 0, -1):
            if self.counts[j - 1]:
                return j
        return 0


def histogram(lengths: Sequence[int] | np.ndarray, grid: BoundaryGrid) -> IntervalHistogram:
    arr = np.asarray(lengths, dtype=np.int64)
    if arr.size:
        if arr.min() < 1:
            raise BucketingError("sequence lengths must be >= 1")
        if arr.max() > grid.max_len:
            raise BucketingError("sequence exceeds grid")
    idx = np.searchsorted(np.asarray(grid.u), arr, side="left")
    counts = np.bincount(idx, minlength=len(grid))
    return IntervalHistogram(grid, tuple(int(c) for c in counts), int(arr.sum()))


def dynamic_buckets(hist: IntervalHistogram, R: int) -> Bucketing:
    """Choose at most ``R`` grid boundaries minimizing padding.

    Empty grid intervals are dropped first, so the result has
    ``min(R, occupied intervals)`` boundaries. Equal-cost choices resolve to
    the lexicographically smallest boundary list.
    """
    if R < 1:
        raise BucketingError("R must be >= 1")
    occupied = [k for k, c in enumerate(hist.counts) if c]
    if not occupied:
        raise BucketingError("histogram has no sequences")
    ends = [hist.grid.u[k] for k in occupied]
    counts = [hist.counts[k] for k in occupied]
    cross, picks = _kernels.bucket_dp(ends, counts, R)
    return Bucketing(
        tuple(ends[e] for e in picks),
        cross_padding=int(cross),
        total_padding=int(cross) + hist.intra_padding(),
    )


def padding_cost(lengths: Sequence[int] | np.ndarray, bucketing: Bucketing) -> int:
    arr = np.asarray(lengths, dtype=np.int64)
    if arr.size == 0:
        return 0
    idx = bucketing.bucket_of(arr)
    return int(np.asarray(bucketing.boundaries)[idx].sum() - arr.sum())


def bucket_counts(
    lengths: Sequence[int] | np.ndarray, bucketing: Bucketing, with_fractions: bool = False
) -> BatchHistogram:
    idx = bucketing.bucket_of(lengths)
    counts = tuple(int(c) for c in np.bincount(idx, minlength=bucketing.R))
    fractions = None
    if with_fractions:
        total = sum(counts)
        if total == 0:
            raise BucketingError("cannot form fractions of an empty batch")
        fractions = tuple(c / total for c in counts)
    return BatchHistogram(bucketing.boundaries, counts, fractions)


def sample_boundaries(
    workload: WorkloadSpec,
    multiplier: int = DEFAULT_MULTIPLIER,
    R: int = DEFAULT_R,
    grid: BoundaryGrid | None = None,
    seed: int = 0,
) -> tuple[Bucketing, BatchHistogram]:
    """Bucket a large synthetic batch drawn from the task mixture.

    ``multiplier * batch_size`` lengths are drawn per task, so tasks weigh in
    proportion to their batch sizes. Returns the boundaries and the empirical
    per-bucket fractions.
    """
    if multiplier < 1:
        raise BucketingError("multiplier must be >= 1")
    grid = grid or BoundaryGrid.uniform(16384)
    rng = np.random.default_rng([seed, 0])
    lengths = np.concatenate([x for _, x in draw_lengths(workload, rng, grid.max_len, multiplier)])
    bucketing = dynamic_buckets(histogram(lengths, grid), R)
    return bucketing, bucket_counts(lengths, bucketing, with_fractions=True)

