"""Fitted micro-batch cost curves and replica-level step time.

A configuration processes one chunk of ``b`` sequences padded to ``s`` tokens
in ``t(b, s) = b * (a2*s^2 + a1*s + a0)`` seconds. A replica handed ``d_j``
sequences of bucket ``j`` runs ``d_j // b_j`` full chunks plus one remainder
chunk per bucket, where ``b_j = M // s_j``; with ``p`` pipeline stages the
slowest chunk is paid ``p - 1`` more times as bubble.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .configspace import ConfigError, ParallelConfig

PROFILE_HEADER = ("tp", "pp", "max_seq_len", "a2", "a1", "a0")
SAMPLES_HEADER = ("tp", "pp", "batch_size", "seq_len", "time_s")

_LENGTH_SCALE = 1024.0


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class Coefficients:
    a2: float
    a1: float
    a0: float

    def unit(self, s: int) -> float:
        """Seconds per sequence of ``s`` tokens."""
        return self.a2 * s * s + self.a1 * s + self.a0


@dataclass(frozen=True)
class ProfilingSample:
    tp: int
    pp: int
    batch_size: int
    seq_len: int
    time: float

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.seq_len < 1 or not self.time > 0:
            raise CostModelError(f"invalid profiling sample {self}")


@dataclass
class CostProfile:
    """Per-configuration cost coefficients.

    ``residuals`` holds the largest relative fit residual per configuration
    key when the profile came out of :func:`fit_cost_curve`.
    """

    configs: dict[tuple[int, int], ParallelConfig]
    coeffs: dict[tuple[int, int], Coefficients]
    residuals: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.configs) != set(self.coeffs):
            raise CostModelError("configs and coefficients cover different keys")

    def __contains__(self, config: ParallelConfig) -> bool:
        return config.key in self.coeffs

    def coefficients(self, config: ParallelConfig) -> Coefficients:
        try:
            return self.coeffs[config.key]
        except KeyError:
            raise CostModelError(f"no cost curve for {config.label()}") from None

    def config(self, tp: int, pp: int) -> ParallelConfig:
        try:
            return self.configs[(tp, pp)]
        except KeyError:
            raise CostModelError(f"no cost curve for <{tp},{pp}>") from None

    def all_configs(self) -> list[ParallelConfig]:
        return sorted(
            self.configs.values(),
            key=lambda c: (c.gpus_per_replica, c.max_seq_len, c.tp_degree, c.pp_stages),
        )

    def restrict(self, configs: Iterable[ParallelConfig]) -> "CostProfile":
        keys = [c.key for c in configs]
        return CostProfile(
            {k: self.configs[k] for k in keys},
            {k: self.coeffs[k] for k in keys},
            {k: self.residuals[k] for k in keys if k in self.residuals},
        )

    def scaled(self, factor: float) -> "CostProfile":
        return CostProfile(
            dict(self.configs),
            {
                k: Coefficients(c.a2 * factor, c.a1 * factor, c.a0 * factor)
                for k, c in self.coeffs.items()
            },
        )

    # -- serialization ----------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.dumps())

    def dumps(self) -> str:
        lines = [",".join(PROFILE_HEADER)]
        for cfg in self.all_configs():
            c = self.coeffs[cfg.key]
            lines.append(
                f"{cfg.tp_degree},{cfg.pp_stages},{cfg.max_seq_len},"
                f"{c.a2!r},{c.a1!r},{c.a0!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path: str | Path) -> "CostProfile":
        configs, coeffs = {}, {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            if tuple(reader.fieldnames or ()) != PROFILE_HEADER:
                raise CostModelError(f"{path}: expected header {','.join(PROFILE_HEADER)}")
            for r in reader:
                try:
                    cfg = ParallelConfig(int(r["tp"]), int(r["pp"]), int(r["max_seq_len"]))
                    co = Coefficients(float(r["a2"]), float(r["a1"]), float(r["a0"]))
                except (TypeError, ValueError) as exc:
                    raise CostModelError(f"{path}: {exc}") from None
                configs[cfg.key] = cfg
                coeffs[cfg.key] = co
        if not configs:
            raise CostModelError(f"{path}: empty profile")
        return cls(configs, coeffs)


def read_samples(path: str | Path) -> list[ProfilingSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if tuple(reader.fieldnames or ()) != SAMPLES_HEADER:
            raise CostModelError(f"{path}: expected header {','.join(SAMPLES_HEADER)}")
        try:
            return [
                ProfilingSample(
                    int(r["tp"]), int(r["pp"]), int(r["batch_size"]),
                    int(r["seq_len"]), float(r["time_s"]),
                )
                for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise CostModelError(f"{path}: {exc}") from None


def write_samples(samples: Iterable[ProfilingSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLES_HEADER)
        for s in samples:
            w.writerow([s.tp, s.pp, s.batch_size, s.seq_len, repr(s.time)])


def _group(samples: Iterable[ProfilingSample]) -> dict[tuple[int, int], list[ProfilingSample]]:
    out: dict[tuple[int, int], list[ProfilingSample]] = {}
    for s in samples:
        out.setdefault((s.tp, s.pp), []).append(s)
    return dict(sorted(out.items()))


def _lstsq(lengths: np.ndarray, per_seq: np.ndarray) -> Coefficients:
    # columns are rescaled so that s^2 and 1 have comparable magnitude
    x = lengths / _LENGTH_SCALE
    design = np.column_stack([x * x, x, np.ones_like(x)])
    sol, *_ = np.linalg.lstsq(design, per_seq, rcond=None)
    a2, a1, a0 = sol
    if a2 < 0:
        sol, *_ = np.linalg.lstsq(design[:, 1:], per_seq, rcond=None)
        a2, (a1, a0) = 0.0, sol
    return Coefficients(
        float(a2) / _LENGTH_SCALE**2, float(a1) / _LENGTH_SCALE, float(a0)
    )


def fit_cost_curve(samples: Sequence[ProfilingSample], layers: int = 1) -> CostProfile:
    """Least-squares fit of per-sequence time against ``{s^2, s, 1}``.

    ``layers`` multiplies every measured time, for profiles taken on a
    single transformer layer. The memory bound of each configuration is the
    largest chunk (``batch_size * seq_len``) seen in its samples.
    """
    if layers < 1:
        raise CostModelError("layers must be >= 1")
    groups = _group(samples)
    if not groups:
        raise CostModelError("no profiling samples")
    configs, coeffs, residuals = {}, {}, {}
    for key, rows in groups.items():
        lengths = np.array([r.seq_len for r in rows], dtype=float)
        if len(rows) < 3 or len(set(lengths.tolist())) < 3:
            raise CostModelError(
                f"<{key[0]},{key[1]}> needs samples at >= 3 distinct sequence lengths"
            )
        per_seq = np.array([r.time * layers / r.batch_size for r in rows])
        co = _lstsq(lengths, per_seq)
        pred = np.array([co.unit(int(s)) for s in lengths])
        if np.any(pred <= 0):
            raise CostModelError(f"degenerate fit for <{key[0]},{key[1]}>")
        configs[key] = ParallelConfig(key[0], key[1], max(r.seq_len * r.batch_size for r in rows))
        coeffs[key] = co
        residuals[key] = float(np.max(np.abs(pred - per_seq) / per_seq))
    return CostProfile(configs, coeffs, residuals)


def loo_errors(samples: Sequence[ProfilingSample]) -> dict[tuple[int, int], float]:
    """Worst leave-one-out relative prediction error per configuration."""
    out = {}
    for key, rows in _group(samples).items():
        worst = 0.0
        for k in range(len(rows)):
            rest = rows[:k] + rows[k + 1:]
            co = fit_cost_curve(rest).coeffs[key]
            held = rows[k]
            pred = held.batch_size * co.unit(held.seq_len)
            worst = max(worst, abs(pred - held.time) / held.time)
        out[key] = worst
    return out


# -- time evaluation -------------------------------------------------------------


def schedule_time(
    unit_costs: Sequence[float],
    chunk_sizes: Sequence[int],
    counts: Sequence[int],
    pp_stages: int,
) -> float:
    """Replica time for per-bucket sequence ``counts``.

    This is the single evaluation path for every time the package reports;
    the compiled brute-force kernel repeats the exact same float operations.
    """
    compute = 0.0
    bubble = 0.0
    for c, b, q in zip(unit_costs, chunk_sizes, counts):
        if q == 0:
            continue
        m, rem = divmod(q, b)
        full = b * c
        tail = rem * c
        compute += m * full + tail
        longest = full if m else tail
        if longest > bubble:
            bubble = longest
    return compute + (pp_stages - 1) * bubble


def chunk_size(config: ParallelConfig, s: int) -> int:
    return config.max_seq_len // s


def micro_time(profile: CostProfile, config: ParallelConfig, b: int, s: int) -> float:
    if b < 0 or s < 1:
        raise CostModelError(f"invalid chunk b={b} s={s}")
    if b == 0:
        return 0.0
    if b * s > config.max_seq_len:
        raise CostModelError("chunk exceeds memory budget")
    return b * profile.coefficients(config).unit(s)


@dataclass(frozen=True)
class BucketSchedule:
    seq_len: int
    chunk_size: int
    full_chunks: int
    remainder: int

    @property
    def count(self) -> int:
        return self.full_chunks * self.chunk_size + self.remainder


def microbatch_schedule(
    config: ParallelConfig, counts: Sequence[int], boundaries: Sequence[int]
) -> list[BucketSchedule]:
    out = []
    for d, s in zip(counts, boundaries):
        if d and s > config.max_seq_len:
            raise CostModelError("bucket exceeds max supported length")
        b = chunk_size(config, s)
        if b == 0:
            out.append(BucketSchedule(s, 0, 0, 0))
            continue
        m, rem = divmod(d, b)
        out.append(BucketSchedule(s, b, m, rem))
    return out


def bucket_costs(
    profile: CostProfile, config: ParallelConfig, boundaries: Sequence[int]
) -> tuple[list[float], list[int]]:
    """Per-sequence cost and chunk size for every bucket the config supports."""
    co = profile.coefficients(config)
    units, chunks = [], []
    for s in boundaries:
        if s > config.max_seq_len:
            break
        units.append(co.unit(s))
        chunks.append(config.max_seq_len // s)
    return units, chunks


def replica_time(
    profile: CostProfile,
    config: ParallelConfig,
    counts: Sequence[int],
    boundaries: Sequence[int],
) -> float:
    if len(counts) > len(boundaries):
        raise CostModelError("more counts than buckets")
    units, chunks = bucket_costs(profile, config, boundaries)
    r = len(units)
    if any(counts[r:]):
        raise CostModelError("bucket exceeds max supported length")
    return schedule_time(units, chunks, counts[:r], config.pp_stages)


def atb(profile: CostProfile, config: ParallelConfig, s: int) -> float:
    """Average throughput bound: tokens per GPU per second at the largest
    chunk that fits in memory."""
    if s < 1 or s > config.max_seq_len:
        raise CostModelError(f"length {s} exceeds max supported length {config.max_seq_len}")
    b = config.max_seq_len // s
    return b * s / (config.gpus_per_replica * micro_time(profile, config, b, s))
