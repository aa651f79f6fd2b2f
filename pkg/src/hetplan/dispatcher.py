"""Per-step dispatching of a bucketed batch onto a fixed deployment."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from typing import Sequence

from .bucketing import BatchHistogram
from .configspace import ParallelConfig
from .costmodel import CostProfile, bucket_costs, micro_time, schedule_time
from .optimizer import InfeasibleError, MinimaxInstance, solve_minimax
from .planner import (
    DeploymentPlan,
    PlanningError,
    UncoverableError,
    length_based_assignment,
    make_instance,
)


class ReplanRequired(PlanningError, InfeasibleError):
    pass


@dataclass(frozen=True)
class DispatchPlan:
    """Sequences per (deployed group, bucket) and the resulting step time."""

    configs: tuple[ParallelConfig, ...]
    replicas: tuple[int, ...]
    boundaries: tuple[int, ...]
    d: tuple[tuple[int, ...], ...]
    objective: float
    group_times: tuple[float, ...]

    @property
    def labels(self) -> list[str]:
        return [c.label() for c in self.configs]

    def shares(self) -> list[list[int]]:
        return [[-(-x // p) for x in row] for row, p in zip(self.d, self.replicas)]

    def format(self) -> str:
        lines = [
            f"objective_s={self.objective!r}",
            "boundaries=" + ",".join(str(b) for b in self.boundaries),
            "group,tp,pp,max_seq_len,replicas,time_s," + ",".join(
                f"d{j + 1}" for j in range(len(self.boundaries))
            ),
        ]
        for g, (cfg, p, row, t) in enumerate(
            zip(self.configs, self.replicas, self.d, self.group_times)
        ):
            lines.append(
                f"{g},{cfg.tp_degree},{cfg.pp_stages},{cfg.max_seq_len},{p},{t!r},"
                + ",".join(str(x) for x in row)
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "DispatchPlan":
        objective, boundaries = None, None
        configs, replicas, d, times = [], [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("group,"):
                continue
            if line.startswith("objective_s="):
                objective = float(line.split("=", 1)[1])
            elif line.startswith("boundaries="):
                boundaries = tuple(int(x) for x in line.split("=", 1)[1].split(","))
            elif line.startswith("replica,") or line.startswith("chunks "):
                break
            else:
                f = line.split(",")
                configs.append(ParallelConfig(int(f[1]), int(f[2]), int(f[3])))
                replicas.append(int(f[4]))
                times.append(float(f[5]))
                d.append(tuple(int(x) for x in f[6:]))
        if objective is None or boundaries is None:
            raise PlanningError("dispatch file lacks objective or boundaries")
        return cls(tuple(configs), tuple(replicas), boundaries, tuple(d), objective, tuple(times))


def _prepare(
    plan: DeploymentPlan, hist: BatchHistogram, profile: CostProfile
) -> tuple[MinimaxInstance, list[int]]:
    try:
        inst, index = make_instance(plan, profile, hist.boundaries, hist.counts)
        inst.check_feasible()
    except InfeasibleError as exc:
        raise ReplanRequired(f"re-plan required: {exc}") from None
    return inst, index


def _result(plan, hist, inst, d) -> DispatchPlan:
    objective, times = inst.evaluate(d)
    dep = plan.deployed()
    return DispatchPlan(
        tuple(c for _, c, _ in dep),
        tuple(p for _, _, p in dep),
        tuple(hist.boundaries),
        tuple(tuple(r) for r in d),
        objective,
        times,
    )


def dispatch_balanced(
    plan: DeploymentPlan, hist: BatchHistogram, profile: CostProfile, **solver_kw
) -> DispatchPlan:
    """Minimax-optimal dispatch of one batch onto the deployed groups.

    Supported ranges are recomputed against this batch's boundaries.

    Raises:
        ReplanRequired: an occupied bucket is longer than every deployed
            group can hold.
    """
    inst, _ = _prepare(plan, hist, profile)
    sol = solve_minimax(inst, **solver_kw)
    return _result(plan, hist, inst, [list(r) for r in sol.d])


def dispatch_by_length(
    plan: DeploymentPlan, hist: BatchHistogram, profile: CostProfile
) -> DispatchPlan:
    """Whole buckets to the group with the best throughput bound."""
    inst, _ = _prepare(plan, hist, profile)
    try:
        d = length_based_assignment(plan, profile, hist.boundaries, hist.counts)
    except UncoverableError as exc:
        raise ReplanRequired(f"re-plan required: {exc}") from None
    return _result(plan, hist, inst, d)


@dataclass(frozen=True)
class ReplicaAssignment:
    group: int
    replica: int
    config: ParallelConfig
    counts: tuple[int, ...]


def split_to_replicas(dispatch: DispatchPlan) -> list[ReplicaAssignment]:
    """Spread each group's buckets over its replicas.

    Every replica receives ``d // p`` sequences of a bucket; the ``d % p``
    leftovers go one each to the replicas holding the fewest sequences so
    far (lowest index on ties).
    """
    out = []
    for g, (cfg, p, row) in enumerate(zip(dispatch.configs, dispatch.replicas, dispatch.d)):
        counts = [[0] * len(row) for _ in range(p)]
        held = [0] * p
        for j, x in enumerate(row):
            base, extra = divmod(x, p)
            lucky = sorted(range(p), key=lambda k: (held[k], k))[:extra]
            for k in range(p):
                n = base + (k in lucky)
                counts[k][j] = n
                held[k] += n
        out.extend(ReplicaAssignment(g, k, cfg, tuple(c)) for k, c in enumerate(counts))
    return out


@dataclass(frozen=True)
class Chunk:
    bucket: int
    seq_len: int
    size: int
    time: float


def form_microbatches(
    counts: Sequence[int],
    config: ParallelConfig,
    boundaries: Sequence[int],
    profile: CostProfile,
) -> list[Chunk]:
    """Full chunks of ``M // s`` sequences plus a remainder per bucket,
    slowest first."""
    chunks = []
    for j, (n, s) in enumerate(zip(counts, boundaries)):
        if n == 0:
            continue
        b = config.max_seq_len // s
        if b == 0:
            raise ReplanRequired(f"re-plan required: bucket {j + 1} exceeds {config.label()}")
        full, rem = divmod(n, b)
        sizes = [b] * full + ([rem] if rem else [])
        chunks.extend(Chunk(j, s, k, micro_time(profile, config, k, s)) for k in sizes)
    # stable sort keeps bucket order among equal times
    return sorted(chunks, key=lambda c: -c.time)


def replica_times(
    assignments: Sequence[ReplicaAssignment],
    profile: CostProfile,
    boundaries: Sequence[int],
) -> list[float]:
    out = []
    for a in assignments:
        units, chunks = bucket_costs(profile, a.config, boundaries)
        r = len(units)
        if any(a.counts[r:]):
            raise ReplanRequired("re-plan required: bucket exceeds max supported length")
        out.append(schedule_time(units, chunks, list(a.counts[:r]), a.config.pp_stages))
    return out


def format_assignments(
    dispatch: DispatchPlan, profile: CostProfile
) -> str:
    assignments = split_to_replicas(dispatch)
    times = replica_times(assignments, profile, dispatch.boundaries)
    lines = ["replica,group,time_s," + ",".join(f"n{j + 1}" for j in range(len(dispatch.boundaries)))]
    for k, (a, t) in enumerate(zip(assignments, times)):
        lines.append(f"{k},{a.group},{t!r}," + ",".join(str(x) for x in a.counts))
    for k, a in enumerate(assignments):
        chunks = form_microbatches(a.counts, a.config, dispatch.boundaries, profile)
        # runs of identical chunks as "count*size x length"
        runs = [(k, len(list(g))) for k, g in groupby(f"{c.size}x{c.seq_len}" for c in chunks)]
        body = " ".join(f"{n}*{k}" if n > 1 else k for k, n in runs) or "-"
        lines.append(f"chunks {k}: {body}")
    return "\n".join(lines) + "\n"
