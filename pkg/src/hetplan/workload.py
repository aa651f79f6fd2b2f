"""Fine-tuning task mixtures and their sequence-length distributions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


class WorkloadError(ValueError):
    pass


def lognormal_sigma(skewness: float) -> float:
    """Shape parameter of the lognormal with the given skewness."""
    if skewness <= 0:
        raise WorkloadError("lognormal skewness must be positive")
    # skew = (y + 2) * sqrt(y - 1) with y = exp(sigma^2), increasing in y
    lo, hi = 1.0, 2.0
    while (hi + 2) * math.sqrt(hi - 1) < skewness:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (mid + 2) * math.sqrt(mid - 1) < skewness:
            lo = mid
        else:
            hi = mid
    return math.sqrt(math.log(0.5 * (lo + hi)))


@dataclass(frozen=True)
class Lognormal:
    """Lognormal lengths with the given mean, redrawn above ``max_len``."""

    mean: float
    sigma: float
    max_len: int | None = None

    def sample(self, rng: np.random.Generator, n: int, limit: int) -> np.ndarray:
        cap = limit if self.max_len is None else min(limit, self.max_len)
        mu = math.log(self.mean) - 0.5 * self.sigma**2
        out = rng.lognormal(mu, self.sigma, size=n)
        bad = out > cap
        while bad.any():
            out[bad] = rng.lognormal(mu, self.sigma, size=int(bad.sum()))
            bad = out > cap
        return np.maximum(np.ceil(out), 1).astype(np.int64)

    def max_length(self, limit: int) -> int:
        return limit if self.max_len is None else min(limit, self.max_len)

    def to_dict(self) -> dict:
        d = {"kind": "lognormal", "mean": self.mean, "sigma": self.sigma}
        if self.max_len is not None:
            d["max_len"] = self.max_len
        return d


@dataclass(frozen=True)
class Empirical:
    """Uniform draws (with replacement) from recorded lengths."""

    lengths: tuple[int, ...]
    source: str | None = None

    def sample(self, rng: np.random.Generator, n: int, limit: int) -> np.ndarray:
        if not self.lengths:
            raise WorkloadError("empirical distribution has no lengths")
        arr = np.asarray(self.lengths, dtype=np.int64)
        if arr.max() > limit or arr.min() < 1:
            raise WorkloadError(f"empirical lengths must lie in [1, {limit}]")
        return arr[rng.integers(0, len(arr), size=n)]

    def max_length(self, limit: int) -> int:
        return min(limit, max(self.lengths))

    def to_dict(self) -> dict:
        if self.source is not None:
            return {"kind": "empirical", "path": self.source}
        return {"kind": "empirical", "lengths": list(self.lengths)}


@dataclass(frozen=True)
class PointMass:
    length: int

    def sample(self, rng: np.random.Generator, n: int, limit: int) -> np.ndarray:
        if not 1 <= self.length <= limit:
            raise WorkloadError(f"length {self.length} outside [1, {limit}]")
        return np.full(n, self.length, dtype=np.int64)

    def max_length(self, limit: int) -> int:
        return min(limit, self.length)

    def to_dict(self) -> dict:
        return {"kind": "point", "length": self.length}


Distribution = Union[Lognormal, Empirical, PointMass]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    batch_size: int
    dist: Distribution

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise WorkloadError(f"task {self.name}: batch_size must be >= 1")


@dataclass(frozen=True)
class WorkloadSpec:
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self) -> None:
        if not self.tasks:
            raise WorkloadError("workload has no tasks")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise WorkloadError("task names must be unique")

    @property
    def batch_size(self) -> int:
        return sum(t.batch_size for t in self.tasks)

    def max_length(self, limit: int) -> int:
        """Longest length any task can produce under the grid ``limit``."""
        return max(t.dist.max_length(limit) for t in self.tasks)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise WorkloadError(f"no task named {name!r}")

    def without(self, *names: str) -> "WorkloadSpec":
        return WorkloadSpec(tuple(t for t in self.tasks if t.name not in names))

    def only(self, name: str) -> "WorkloadSpec":
        return WorkloadSpec((self.task(name),))

    def to_dict(self) -> dict:
        return {
            "tasks": [
                {"name": t.name, "batch_size": t.batch_size, "distribution": t.dist.to_dict()}
                for t in self.tasks
            ]
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "WorkloadSpec":
        try:
            tasks = tuple(
                TaskSpec(str(t["name"]), int(t["batch_size"]), _parse_dist(t["distribution"], base))
                for t in data["tasks"]
            )
        except (KeyError, TypeError) as exc:
            raise WorkloadError(f"malformed workload spec: {exc}") from None
        return cls(tasks)

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise WorkloadError(f"{path}: {exc}") from None
        return cls.from_dict(data, base=path.parent)


def _parse_dist(d: dict, base: Path | None) -> Distribution:
    kind = d.get("kind")
    if kind == "lognormal":
        if "sigma" in d:
            sigma = float(d["sigma"])
        elif "skewness" in d:
            sigma = lognormal_sigma(float(d["skewness"]))
        else:
            raise WorkloadError("lognormal needs sigma or skewness")
        max_len = d.get("max_len")
        return Lognormal(float(d["mean"]), sigma, None if max_len is None else int(max_len))
    if kind == "empirical":
        if "lengths" in d:
            return Empirical(tuple(int(x) for x in d["lengths"]))
        p = Path(d["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        values = tuple(int(x) for x in p.read_text().split())
        return Empirical(values, source=str(d["path"]))
    if kind == "point":
        return PointMass(int(d["length"]))
    raise WorkloadError(f"unknown distribution kind {kind!r}")


def draw_lengths(
    workload: WorkloadSpec, rng: np.random.Generator, limit: int, multiplier: int = 1
) -> list[tuple[str, np.ndarray]]:
    """``multiplier * batch_size`` lengths per task, tasks in spec order."""
    return [(t.name, t.dist.sample(rng, multiplier * t.batch_size, limit)) for t in workload.tasks]
