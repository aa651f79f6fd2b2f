"""Deployment planning: how many replicas of each configuration to run.

Plans are scored by the exact minimax dispatch time of the expected batch.
A cheap lower bound from length-based dispatching discards hopeless plans
before any integer program is solved.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .configspace import ClusterSpec, ParallelConfig, supported_ranges
from .costmodel import CostProfile, atb, bucket_costs, schedule_time
from .optimizer import (
    GroupSpec,
    NODE_LIMIT,
    InfeasibleError,
    MinimaxInstance,
    MinimaxSolution,
    OptimizerError,
    minimax_search,
)

DEFAULT_THRESHOLD = 0.15
JOINT_PLAN_CAP = 100_000
# relative slack when handing the best time so far to a solve as a cutoff
_CUTOFF_SLACK = 1e-6


class PlanningError(ValueError):
    pass


class UncoverableError(PlanningError, InfeasibleError):
    pass


class OracleCapExceeded(PlanningError):
    pass


@dataclass(frozen=True)
class DeploymentPlan:
    """Replica counts, one per candidate configuration (zero allowed)."""

    configs: tuple[ParallelConfig, ...]
    replicas: tuple[int, ...]
    expected_time: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if len(self.configs) != len(self.replicas):
            raise PlanningError("one replica count per configuration required")
        if any(p < 0 for p in self.replicas):
            raise PlanningError("replica counts must be non-negative")

    @property
    def gpus_used(self) -> int:
        return sum(p * c.gpus_per_replica for c, p in zip(self.configs, self.replicas))

    @property
    def total_replicas(self) -> int:
        return sum(self.replicas)

    def deployed(self) -> list[tuple[int, ParallelConfig, int]]:
        """``(candidate index, config, replicas)`` for every non-empty group."""
        return [(i, c, p) for i, (c, p) in enumerate(zip(self.configs, self.replicas)) if p]

    def notation(self) -> str:
        return " ".join(f"{c.label()}x{p}" for _, c, p in self.deployed()) or "(empty)"

    def with_time(self, t: float | None) -> "DeploymentPlan":
        return DeploymentPlan(self.configs, self.replicas, t)

    def format(self) -> str:
        lines = [f"# plan {self.notation()}", "tp,pp,max_seq_len,replicas"]
        for c, p in zip(self.configs, self.replicas):
            lines.append(f"{c.tp_degree},{c.pp_stages},{c.max_seq_len},{p}")
        if self.expected_time is not None:
            lines.append(f"expected_step_time_s={self.expected_time!r}")
        lines.append(f"gpus_used={self.gpus_used}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "DeploymentPlan":
        configs, replicas, t = [], [], None
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("tp,"):
                continue
            if line.startswith("expected_step_time_s="):
                t = float(line.split("=", 1)[1])
            elif line.startswith("gpus_used="):
                continue
            else:
                try:
                    tp, pp, m, p = (int(x) for x in line.split(","))
                except ValueError:
                    raise PlanningError(f"bad plan line {line!r}") from None
                configs.append(ParallelConfig(tp, pp, m))
                replicas.append(p)
        if not configs:
            raise PlanningError("plan file lists no configurations")
        return cls(tuple(configs), tuple(replicas), t)


def _tie_key(plan: DeploymentPlan) -> tuple:
    return (plan.gpus_used, plan.total_replicas, plan.replicas)


def robust_ceil(x: float) -> int:
    # B * f_j that is an integer up to float noise must not round up
    r = round(x)
    return int(r) if abs(x - r) <= 1e-9 * max(1.0, abs(x)) else math.ceil(x)


@dataclass(frozen=True)
class PlanningProblem:
    """Inputs of stage-1 planning.

    Either ``fractions`` (expected share of each bucket) or ``counts``
    (a concrete batch) must be given; demands are ``ceil(B * f_j)`` or the
    counts themselves. ``longest`` optionally asks for a deployed
    configuration able to hold sequences of that length, even if the
    expected batch never reaches it.
    """

    cluster: ClusterSpec
    profile: CostProfile
    candidates: tuple[ParallelConfig, ...]
    boundaries: tuple[int, ...]
    batch_size: int
    fractions: tuple[float, ...] | None = None
    counts: tuple[int, ...] | None = None
    longest: int = 0

    def __post_init__(self) -> None:
        if not self.candidates:
            raise PlanningError("no candidate configurations")
        if not self.boundaries:
            raise PlanningError("no bucket boundaries")
        if self.batch_size < 1:
            raise PlanningError("batch size must be >= 1")
        if (self.fractions is None) == (self.counts is None):
            raise PlanningError("give exactly one of fractions or counts")
        vec = self.fractions if self.fractions is not None else self.counts
        if len(vec) != len(self.boundaries):
            raise PlanningError("one fraction or count per bucket required")
        if self.fractions is not None:
            if any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
                raise PlanningError("fractions must be non-negative and sum to 1")
        for c in self.candidates:
            if c not in self.profile:
                raise PlanningError(f"no cost curve for candidate {c.label()}")

    @classmethod
    def from_counts(
        cls,
        cluster: ClusterSpec,
        profile: CostProfile,
        candidates: Sequence[ParallelConfig],
        boundaries: Sequence[int],
        counts: Sequence[int],
    ) -> "PlanningProblem":
        return cls(
            cluster, profile, tuple(candidates), tuple(boundaries),
            max(1, sum(counts)), counts=tuple(counts),
        )

    def demands(self) -> tuple[int, ...]:
        if self.counts is not None:
            return self.counts
        return tuple(robust_ceil(self.batch_size * f) for f in self.fractions)

    def ranges(self) -> list[int]:
        return [supported_ranges(c, self.boundaries) for c in self.candidates]


@dataclass(frozen=True)
class LowerBoundEstimate:
    times: tuple[float, ...]
    gpus: tuple[int, ...]
    value: float


def bound_value(times: Sequence[float], gpus: Sequence[int]) -> float:
    total = sum(gpus)
    return sum(n * t for n, t in zip(gpus, times)) / total


# -- instances -----------------------------------------------------------------


def make_instance(
    plan: DeploymentPlan,
    profile: CostProfile,
    boundaries: Sequence[int],
    demands: Sequence[int],
) -> tuple[MinimaxInstance, list[int]]:
    """Minimax instance of the deployed groups and their candidate indices."""
    groups, index = [], []
    for i, cfg, p in plan.deployed():
        units, chunks = bucket_costs(profile, cfg, boundaries)
        groups.append(GroupSpec(p, cfg.pp_stages, tuple(units), tuple(chunks), cfg.label()))
        index.append(i)
    if not groups:
        raise PlanningError("plan deploys no replicas")
    return MinimaxInstance(tuple(groups), tuple(demands)), index


def length_based_assignment(
    plan: DeploymentPlan,
    profile: CostProfile,
    boundaries: Sequence[int],
    demands: Sequence[int],
) -> list[list[int]]:
    """Each bucket entirely to the deployed group with the highest ATB at its
    boundary (ties to fewer GPUs, then earlier candidates)."""
    deployed = plan.deployed()
    d = [[0] * len(demands) for _ in deployed]
    for j, (s, need) in enumerate(zip(boundaries, demands)):
        if need == 0:
            continue
        best = None
        for g, (_, cfg, _) in enumerate(deployed):
            if cfg.max_seq_len < s:
                continue
            key = (-atb(profile, cfg, s), cfg.gpus_per_replica, g)
            if best is None or key < best[0]:
                best = (key, g)
        if best is None:
            raise UncoverableError(f"bucket {j + 1} (length {s}) is not supported by any group")
        d[best[1]][j] = need
    return d


def lower_bound(
    plan: DeploymentPlan,
    demands: Sequence[int],
    profile: CostProfile,
    boundaries: Sequence[int],
) -> LowerBoundEstimate:
    """GPU-weighted mean group time after length-based dispatching."""
    d = length_based_assignment(plan, profile, boundaries, demands)
    times, gpus = [], []
    for row, (_, cfg, p) in zip(d, plan.deployed()):
        units, chunks = bucket_costs(profile, cfg, boundaries)
        shares = [-(-x // p) for x in row[: len(units)]]
        times.append(schedule_time(units, chunks, shares, cfg.pp_stages))
        gpus.append(p * cfg.gpus_per_replica)
    return LowerBoundEstimate(tuple(times), tuple(gpus), bound_value(times, gpus))


# -- enumeration -----------------------------------------------------------------


def _vectors(sizes: Sequence[int], budget: int) -> Iterator[tuple[int, ...]]:
    # every replica-count vector within the GPU budget, in lexicographic order
    if not sizes:
        yield ()
        return
    head, rest = sizes[0], sizes[1:]
    for p in range(budget // head + 1):
        for tail in _vectors(rest, budget - p * head):
            yield (p,) + tail


def enumerate_plans(
    cluster: ClusterSpec,
    candidates: Sequence[ParallelConfig],
    boundaries: Sequence[int],
    maximal: bool = True,
    cover: int | None = None,
    longest: int = 0,
) -> list[DeploymentPlan]:
    """Feasible plans that can serve bucket ``cover`` (default: the last).

    With ``maximal`` only plans that leave too few GPUs for another replica
    of any useful candidate are kept; adding replicas never slows a step, so
    nothing is lost. Candidates that fit no bucket are never deployed.
    """
    candidates = tuple(candidates)
    if not candidates:
        raise PlanningError("no candidate configurations")
    cover = len(boundaries) if cover is None else cover
    ranges = [supported_ranges(c, boundaries) for c in candidates]
    if cover and not any(r >= cover for r in ranges):
        raise UncoverableError("longest bucket uncoverable")
    useful = [i for i, r in enumerate(ranges) if r > 0]
    sizes = [candidates[i].gpus_per_replica for i in useful]
    smallest = min(sizes) if sizes else 0
    out = []
    for vec in _vectors(sizes, cluster.total_gpus):
        if not any(vec):
            continue
        used = sum(p * n for p, n in zip(vec, sizes))
        if maximal and cluster.total_gpus - used >= smallest:
            continue
        if cover and not any(p and ranges[i] >= cover for p, i in zip(vec, useful)):
            continue
        if longest and not any(
            p and candidates[i].max_seq_len >= longest for p, i in zip(vec, useful)
        ):
            continue
        full = [0] * len(candidates)
        for p, i in zip(vec, useful):
            full[i] = p
        out.append(DeploymentPlan(candidates, tuple(full)))
    return out


def filter_plans(
    plans: Sequence[DeploymentPlan],
    bounds: Sequence[float],
    threshold: float = DEFAULT_THRESHOLD,
) -> list[DeploymentPlan]:
    if len(plans) != len(bounds):
        raise PlanningError("one bound per plan required")
    if not plans:
        return []
    best = min(bounds)
    return [p for p, b in zip(plans, bounds) if b <= (1 + threshold) * best]


# -- selection -----------------------------------------------------------------


@dataclass(frozen=True)
class PlanOutcome:
    """Chosen plan and its dispatch.

    ``bound`` is a proven lower bound on the best time over every plan
    considered; it equals ``objective`` unless a node budget cut a search
    short.
    """

    plan: DeploymentPlan
    objective: float
    dispatch: MinimaxSolution
    group_index: tuple[int, ...]
    considered: int
    solved: int
    bound: float = math.nan

    @property
    def exact(self) -> bool:
        return self.bound >= self.objective


def _select(
    plans: Sequence[DeploymentPlan],
    bounds: Sequence[float],
    profile: CostProfile,
    boundaries: Sequence[int],
    demands: Sequence[int],
    workers: int,
    node_limit: int,
) -> tuple[DeploymentPlan, MinimaxSolution, list[int], int, float]:
    # promising plans first so the cutoff bites early; a plan later in this
    # order still wins a tie when its tie key is smaller
    order = [p for _, p in sorted(zip(bounds, plans), key=lambda x: (x[0],) + _tie_key(x[1]))]
    best: tuple | None = None
    solved = 0
    floor = math.inf

    def run(plan: DeploymentPlan, cutoff: float | None):
        inst, index = make_instance(plan, profile, boundaries, demands)
        return minimax_search(inst, cutoff=cutoff, node_limit=node_limit), index

    def consider(plan, res, index):
        nonlocal best, floor, solved
        floor = min(floor, res.bound)
        sol = res.solution
        if sol is None:
            return
        solved += 1
        key = (sol.objective,) + _tie_key(plan)
        if best is None or key < best[0]:
            best = (key, plan, sol, index)

    if workers <= 1:
        for plan in order:
            cutoff = None if best is None else best[0][0] * (1 + _CUTOFF_SLACK)
            consider(plan, *run(plan, cutoff))
    else:
        # the first plan seeds the cutoff; the rest run concurrently against it
        consider(order[0], *run(order[0], None))
        cutoff = best[0][0] * (1 + _CUTOFF_SLACK)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: run(p, cutoff), order[1:]))
        for plan, (res, index) in zip(order[1:], results):
            consider(plan, res, index)
    if best is None:
        raise PlanningError("no plan could be solved")
    _, plan, sol, index = best
    return plan, sol, index, solved, min(floor, sol.objective)


def plan_deployment(
    problem: PlanningProblem,
    threshold: float = DEFAULT_THRESHOLD,
    prune: bool = True,
    workers: int = 1,
    node_limit: int = NODE_LIMIT,
) -> PlanOutcome:
    """Best deployment plan for the expected batch.

    Maximal plans are scored by their lower bound, those within
    ``threshold`` of the best bound are solved exactly, and the fastest wins;
    ties go to fewer GPUs, then fewer replicas, then the smaller count
    vector.
    """
    demands = problem.demands()
    cover = _last_demanded(demands)
    plans = enumerate_plans(
        problem.cluster, problem.candidates, problem.boundaries, cover=cover, longest=problem.longest
    )
    if not plans:
        raise UncoverableError("no feasible deployment plan within the GPU budget")
    kept = plans
    if prune:
        bounds = [
            lower_bound(p, demands, problem.profile, problem.boundaries).value for p in plans
        ]
        kept = filter_plans(plans, bounds, threshold)
        assert kept, "filtering keeps the plan with the smallest bound"
    else:
        bounds = [0.0] * len(plans)
    kept_set = set(map(id, kept))
    kb = [b for p, b in zip(plans, bounds) if id(p) in kept_set]
    plan, sol, index, solved, floor = _select(
        kept, kb, problem.profile, problem.boundaries, demands, workers, node_limit
    )
    return PlanOutcome(
        plan.with_time(sol.objective), sol.objective, sol, tuple(index), len(kept), solved, floor
    )


def _last_demanded(demands: Sequence[int]) -> int:
    last = 0
    for j, b in enumerate(demands):
        if b:
            last = j + 1
    return last


def solve_joint(
    problem: PlanningProblem,
    maximal: bool = False,
    cap: int = JOINT_PLAN_CAP,
    workers: int = 1,
    node_limit: int = NODE_LIMIT,
) -> PlanOutcome:
    """Exact joint optimum over every feasible plan for a concrete batch.

    Raises:
        OracleCapExceeded: more than ``cap`` plans would have to be solved.
    """
    demands = problem.demands()
    cover = _last_demanded(demands)
    if cover == 0:
        raise PlanningError("batch is empty")
    ranges = problem.ranges()
    sizes = [c.gpus_per_replica for c, r in zip(problem.candidates, ranges) if r > 0]
    if _count_vectors(sizes, problem.cluster.total_gpus, cap) > cap:
        raise OracleCapExceeded("oracle cap exceeded")
    plans = enumerate_plans(
        problem.cluster, problem.candidates, problem.boundaries, maximal=maximal, cover=cover
    )
    if not plans:
        raise UncoverableError("no feasible deployment plan within the GPU budget")
    bounds = [lower_bound(p, demands, problem.profile, problem.boundaries).value for p in plans]
    plan, sol, index, solved, floor = _select(
        plans, bounds, problem.profile, problem.boundaries, demands, workers, node_limit
    )
    return PlanOutcome(
        plan.with_time(sol.objective), sol.objective, sol, tuple(index), len(plans), solved, floor
    )


def _count_vectors(sizes: Sequence[int], budget: int, cap: int) -> int:
    # number of vectors with sum(p * n) <= budget, stopping early past cap
    ways = [1] * (budget + 1)
    for n in sizes:
        nxt = [0] * (budget + 1)
        for b in range(budget + 1):
            nxt[b] = ways[b] + (nxt[b - n] if b >= n else 0)
        ways = [min(w, cap + 1) for w in nxt]
    return ways[budget]


def replan_on_change(
    current: DeploymentPlan, problem: PlanningProblem, **kwargs
) -> tuple[PlanOutcome, bool]:
    out = plan_deployment(problem, **kwargs)
    return out, out.plan != current
