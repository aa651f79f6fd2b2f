"""Parallel configurations, throughput tables and candidate proposal."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

TABLE_HEADER = ("tp", "pp", "num_gpus", "seq_len", "thruput_tokens_per_gpu_s")


class ConfigError(ValueError):
    """Malformed configuration or throughput data."""


@dataclass(frozen=True, order=True)
class ParallelConfig:
    """One way to shard a single fine-tuning replica.

    ``max_seq_len`` is the longest chunk (in tokens) a replica can hold
    without running out of memory.
    """

    tp_degree: int
    pp_stages: int
    max_seq_len: int

    def __post_init__(self) -> None:
        if self.tp_degree < 1 or self.pp_stages < 1:
            raise ConfigError(f"invalid degrees tp={self.tp_degree} pp={self.pp_stages}")
        if self.max_seq_len <= 0:
            raise ConfigError(f"max_seq_len must be positive, got {self.max_seq_len}")

    @property
    def gpus_per_replica(self) -> int:
        return self.tp_degree * self.pp_stages

    @property
    def key(self) -> tuple[int, int]:
        return (self.tp_degree, self.pp_stages)

    def label(self) -> str:
        return f"<{self.tp_degree},{self.pp_stages}>"

    def __str__(self) -> str:
        return (
            f"tp={self.tp_degree} pp={self.pp_stages} "
            f"gpus={self.gpus_per_replica} max_len={self.max_seq_len}"
        )


@dataclass(frozen=True)
class ThroughputEntry:
    tp: int
    pp: int
    num_gpus: int
    seq_len: int
    thruput: float


@dataclass(frozen=True)
class ClusterSpec:
    total_gpus: int

    def __post_init__(self) -> None:
        if self.total_gpus < 1:
            raise ConfigError(f"total_gpus must be positive, got {self.total_gpus}")

    def check(self, candidates: Iterable[ParallelConfig]) -> None:
        widest = max((c.gpus_per_replica for c in candidates), default=0)
        if widest > self.total_gpus:
            raise ConfigError(
                f"cluster of {self.total_gpus} GPUs cannot host a {widest}-GPU replica"
            )


class ThroughputTable:
    """Profiled throughput (tokens per GPU per second).

    Rows may list a configuration at a GPU count that is a multiple of its
    replica size; such rows stand for data-parallel copies of the same
    replica and carry the same throughput. An out-of-memory cell is simply
    absent.
    """

    def __init__(self, entries: Iterable[ThroughputEntry]):
        rows: dict[tuple[int, int, int, int], ThroughputEntry] = {}
        for e in entries:
            if e.tp < 1 or e.pp < 1 or e.seq_len < 1 or e.thruput <= 0:
                raise ConfigError(f"invalid throughput row {e}")
            if e.num_gpus % (e.tp * e.pp):
                raise ConfigError(
                    f"num_gpus={e.num_gpus} is not a multiple of tp*pp for {e}"
                )
            k = (e.tp, e.pp, e.num_gpus, e.seq_len)
            if k in rows:
                raise ConfigError(f"duplicate throughput row for {k}")
            rows[k] = e
        self.entries: tuple[ThroughputEntry, ...] = tuple(
            rows[k] for k in sorted(rows)
        )
        max_len: dict[tuple[int, int], int] = {}
        for e in self.entries:
            max_len[(e.tp, e.pp)] = max(max_len.get((e.tp, e.pp), 0), e.seq_len)
        self._configs = {
            k: ParallelConfig(k[0], k[1], m) for k, m in sorted(max_len.items())
        }

    def __len__(self) -> int:
        return len(self.entries)

    def configs(self) -> list[ParallelConfig]:
        return sorted(
            self._configs.values(),
            key=lambda c: (c.gpus_per_replica, c.max_seq_len, c.tp_degree, c.pp_stages),
        )

    def config(self, tp: int, pp: int) -> ParallelConfig:
        try:
            return self._configs[(tp, pp)]
        except KeyError:
            raise ConfigError(f"no profiling data for tp={tp} pp={pp}") from None

    def thruput(self, config: ParallelConfig, seq_len: int) -> float | None:
        """Throughput of a single replica at ``seq_len`` (None when OOM)."""
        best = None
        for e in self.entries:
            if (e.tp, e.pp, e.seq_len) == (*config.key, seq_len):
                if best is None or e.num_gpus < best.num_gpus:
                    best = e
        return None if best is None else best.thruput

    @classmethod
    def from_csv(cls, path: str | Path) -> "ThroughputTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            if tuple(reader.fieldnames or ()) != TABLE_HEADER:
                raise ConfigError(f"{path}: expected header {','.join(TABLE_HEADER)}")
            try:
                rows = [
                    ThroughputEntry(
                        int(r["tp"]),
                        int(r["pp"]),
                        int(r["num_gpus"]),
                        int(r["seq_len"]),
                        float(r["thruput_tokens_per_gpu_s"]),
                    )
                    for r in reader
                ]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls(rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for e in self.entries:
                w.writerow([e.tp, e.pp, e.num_gpus, e.seq_len, repr(e.thruput)])


def propose_candidates(table: ThroughputTable) -> list[ParallelConfig]:
    """Keep, for every (num_gpus, seq_len) cell, the configuration with the
    highest throughput.

    Equal throughputs go to the smaller TP degree, then the smaller PP degree.
    """
    if len(table) == 0:
        raise ConfigError("no profiling data")
    winners: dict[tuple[int, int], ThroughputEntry] = {}
    for e in table.entries:
        cell = (e.num_gpus, e.seq_len)
        cur = winners.get(cell)
        if cur is None or (-e.thruput, e.tp, e.pp) < (-cur.thruput, cur.tp, cur.pp):
            winners[cell] = e
    chosen = {table.config(e.tp, e.pp) for e in winners.values()}
    return sorted(
        chosen,
        key=lambda c: (c.gpus_per_replica, c.max_seq_len, c.tp_degree, c.pp_stages),
    )


@dataclass(frozen=True)
class OrderViolation:
    winner_long: ParallelConfig
    winner_short: ParallelConfig
    short_len: int
    long_len: int

    def __str__(self) -> str:
        return (
            f"{self.winner_long.label()} beats {self.winner_short.label()} at "
            f"{self.long_len} but loses at {self.short_len}"
        )


def check_partial_order(table: ThroughputTable) -> list[OrderViolation]:
    """Report pairs of same-size configurations whose ranking flips between a
    longer and a shorter sequence length."""
    out: list[OrderViolation] = []
    configs = table.configs()
    lengths = sorted({e.seq_len for e in table.entries})
    for a, b in combinations(configs, 2):
        if a.gpus_per_replica != b.gpus_per_replica:
            continue
        common = [
            s
            for s in lengths
            if table.thruput(a, s) is not None and table.thruput(b, s) is not None
        ]
        for short, long_ in combinations(common, 2):
            ta_s, tb_s = table.thruput(a, short), table.thruput(b, short)
            ta_l, tb_l = table.thruput(a, long_), table.thruput(b, long_)
            if ta_l > tb_l and tb_s > ta_s:
                out.append(OrderViolation(a, b, short, long_))
            elif tb_l > ta_l and ta_s > tb_s:
                out.append(OrderViolation(b, a, short, long_))
    return out


def supported_ranges(config: ParallelConfig, boundaries: Sequence[int]) -> int:
    """Number of leading buckets whose boundary fits in ``config.max_seq_len``."""
    return bisect.bisect_right(boundaries, config.max_seq_len)


def format_candidates(configs: Iterable[ParallelConfig]) -> str:
    return "".join(f"{c}\n" for c in configs)


def parse_candidates(text: str) -> list[ParallelConfig]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(part.split("=", 1) for part in line.split())
        cfg = ParallelConfig(int(fields["tp"]), int(fields["pp"]), int(fields["max_len"]))
        if cfg.gpus_per_replica != int(fields["gpus"]):
            raise ConfigError(f"inconsistent gpus in line {line!r}")
        out.append(cfg)
    return out
