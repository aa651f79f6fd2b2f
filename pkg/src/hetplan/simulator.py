"""Step-level simulation of multi-task fine-tuning under several strategies.

Every step draws a fresh batch, buckets it, dispatches it onto the
deployment of the strategy and charges the slowest replica's time to every
deployed GPU.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bucketing import (
    DEFAULT_MULTIPLIER,
    DEFAULT_R,
    BoundaryGrid,
    bucket_counts,
    dynamic_buckets,
    histogram,
    padding_cost,
    sample_boundaries,
)
from .configspace import ClusterSpec, ParallelConfig
from .costmodel import CostProfile
from .dispatcher import (
    DispatchPlan,
    dispatch_balanced,
    dispatch_by_length,
    replica_times,
    split_to_replicas,
)
from .planner import (
    DEFAULT_THRESHOLD,
    DeploymentPlan,
    PlanningError,
    PlanningProblem,
    make_instance,
    plan_deployment,
    robust_ceil,
    solve_joint,
)
from .workload import WorkloadSpec

STRATEGIES = ("balanced", "balanced-sequential", "task-fused", "task-sequential", "het-lengthbased")
# node budget per dispatch solve; large batches rarely prove optimality
DISPATCH_NODE_LIMIT = 2000
# node budget per plan in the joint solves of the gap study
JOINT_NODE_LIMIT = 5000


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Settings:
    """Everything a simulation needs besides the workload."""

    cluster: ClusterSpec
    profile: CostProfile
    candidates: tuple[ParallelConfig, ...]
    grid: BoundaryGrid
    R: int = DEFAULT_R
    multiplier: int = DEFAULT_MULTIPLIER
    threshold: float = DEFAULT_THRESHOLD
    node_limit: int = DISPATCH_NODE_LIMIT
    timing: bool = False


@dataclass(frozen=True)
class StepResult:
    step: int
    group_times: tuple[float, ...]
    step_time: float
    gpu_seconds: float
    padding_tokens: int
    solve_ms: float | None = field(default=None, compare=False)


@dataclass(frozen=True)
class SimulationReport:
    strategy: str
    steps: tuple[StepResult, ...]
    plan: str

    @property
    def mean_step_time(self) -> float:
        return statistics.fmean(s.step_time for s in self.steps)

    @property
    def std_step_time(self) -> float:
        return statistics.pstdev(s.step_time for s in self.steps)

    @property
    def gpu_seconds(self) -> float:
        return sum(s.gpu_seconds for s in self.steps)


def sample_batch(workload: WorkloadSpec, step: int, seed: int, limit: int) -> list[tuple[str, np.ndarray]]:
    """Per task, ``batch_size`` lengths; a pure function of ``(seed, step)``."""
    rng = np.random.default_rng([seed, 1, step])
    return [(t.name, t.dist.sample(rng, t.batch_size, limit)) for t in workload.tasks]


def _bucketize(lengths: np.ndarray, grid: BoundaryGrid, R: int):
    bucketing = dynamic_buckets(histogram(lengths, grid), R)
    return bucketing, bucket_counts(lengths, bucketing)


def run_step(
    plan: DeploymentPlan,
    lengths: np.ndarray,
    settings: Settings,
    mode: str = "balanced",
    step: int = 0,
) -> tuple[StepResult, DispatchPlan]:
    """Bucket, dispatch and time one batch on a fixed deployment.

    Group times are the slowest of their replicas after the round-robin
    split, each re-evaluated through the cost model.
    """
    bucketing, hist = _bucketize(lengths, settings.grid, settings.R)
    start = time.perf_counter()
    if mode == "balanced":
        dispatch = dispatch_balanced(plan, hist, settings.profile, node_limit=settings.node_limit)
    elif mode == "by-length":
        dispatch = dispatch_by_length(plan, hist, settings.profile)
    else:
        raise SimulationError(f"unknown dispatch mode {mode!r}")
    elapsed = (time.perf_counter() - start) * 1e3
    assignments = split_to_replicas(dispatch)
    times = replica_times(assignments, settings.profile, hist.boundaries)
    group_times = [0.0] * len(dispatch.configs)
    for a, t in zip(assignments, times):
        group_times[a.group] = max(group_times[a.group], t)
    step_time = max(group_times)
    result = StepResult(
        step,
        tuple(group_times),
        step_time,
        plan.gpus_used * step_time,
        padding_cost(lengths, bucketing),
        elapsed if settings.timing else None,
    )
    return result, dispatch


def _stage_one(
    workload: WorkloadSpec, settings: Settings, seed: int, candidates: Sequence[ParallelConfig]
) -> DeploymentPlan:
    bucketing, hist = sample_boundaries(
        workload, settings.multiplier, settings.R, settings.grid, seed
    )
    problem = PlanningProblem(
        settings.cluster,
        settings.profile,
        tuple(candidates),
        bucketing.boundaries,
        workload.batch_size,
        fractions=hist.fractions,
        longest=workload.max_length(settings.grid.max_len),
    )
    return plan_deployment(
        problem, threshold=settings.threshold, node_limit=settings.node_limit
    ).plan


def homogeneous_plan(
    workload: WorkloadSpec, settings: Settings, seed: int
) -> DeploymentPlan:
    """Fastest single configuration, replicated over the cluster, among
    those that fit the workload's longest possible sequence."""
    longest = workload.max_length(settings.grid.max_len)
    bucketing, hist = sample_boundaries(
        workload, settings.multiplier, settings.R, settings.grid, seed
    )
    demands = [robust_ceil(workload.batch_size * f) for f in hist.fractions]
    best = None
    for i, cfg in enumerate(settings.profile.all_configs()):
        n = cfg.gpus_per_replica
        if cfg.max_seq_len < longest or n > settings.cluster.total_gpus:
            continue
        plan = DeploymentPlan((cfg,), (settings.cluster.total_gpus // n,))
        inst, _ = make_instance(plan, settings.profile, bucketing.boundaries, demands)
        t, _ = inst.evaluate([list(demands)])
        key = (t, plan.gpus_used, i)
        if best is None or key < best[0]:
            best = (key, plan)
    if best is None:
        raise SimulationError(f"no configuration supports sequences of {longest} tokens")
    return best[1]


def simulate(
    workload: WorkloadSpec,
    settings: Settings,
    strategy: str,
    steps: int = 100,
    seed: int = 0,
) -> SimulationReport:
    if strategy not in STRATEGIES:
        raise SimulationError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if steps < 1:
        raise SimulationError("steps must be >= 1")
    settings.cluster.check(settings.candidates)
    limit = settings.grid.max_len
    sequential = strategy.endswith("-sequential")
    names = [t.name for t in workload.tasks] if sequential else [None]
    plans: dict[str | None, DeploymentPlan] = {}
    for name in names:
        wl = workload.only(name) if name else workload
        if strategy in ("balanced", "het-lengthbased", "balanced-sequential"):
            plans[name] = _stage_one(wl, settings, seed, settings.candidates)
        else:
            plans[name] = homogeneous_plan(wl, settings, seed)
    mode = "by-length" if strategy == "het-lengthbased" else "balanced"

    results = []
    for k in range(steps):
        batch = sample_batch(workload, k, seed, limit)
        if not sequential:
            lengths = np.concatenate([x for _, x in batch])
            res, _ = run_step(plans[None], lengths, settings, mode, k)
            results.append(res)
            continue
        parts = [run_step(plans[name], x, settings, mode, k)[0] for name, x in batch]
        solve = None if not settings.timing else sum(p.solve_ms for p in parts)
        results.append(
            StepResult(
                k,
                tuple(t for p in parts for t in p.group_times),
                sum(p.step_time for p in parts),
                sum(p.gpu_seconds for p in parts),
                sum(p.padding_tokens for p in parts),
                solve,
            )
        )
    if sequential:
        label = "; ".join(f"{n}: {plans[n].notation()}" for n in names)
    else:
        label = plans[None].notation()
    return SimulationReport(strategy, tuple(results), label)


@dataclass(frozen=True)
class GapPoint:
    """Decomposed and joint step times of one batch.

    ``joint`` is the best joint time found and ``joint_bound`` a proven lower
    bound on the joint optimum, so ``ratio_bound`` never understates the gap.
    """

    step: int
    decomposed: float
    joint: float
    joint_bound: float

    @property
    def ratio(self) -> float:
        return self.decomposed / self.joint

    @property
    def ratio_bound(self) -> float:
        return self.decomposed / self.joint_bound


def decomposition_gap(
    workload: WorkloadSpec,
    settings: Settings,
    steps: int = 100,
    seed: int = 0,
    joint_node_limit: int = JOINT_NODE_LIMIT,
) -> tuple[DeploymentPlan, list[GapPoint]]:
    """Per step, the frozen-plan dispatch time against the joint optimum of
    the same batch.

    Both times are the solvers' objectives (ceil shares). Every search stops
    after ``joint_node_limit`` nodes, which can only overstate the decomposed
    time; the joint side also reports a proven lower bound, so
    ``ratio_bound`` never understates the gap.
    """
    plan = _stage_one(workload, settings, seed, settings.candidates)
    out = []
    for k in range(steps):
        lengths = np.concatenate([x for _, x in sample_batch(workload, k, seed, settings.grid.max_len)])
        bucketing, hist = _bucketize(lengths, settings.grid, settings.R)
        decomposed = dispatch_balanced(
            plan, hist, settings.profile, node_limit=joint_node_limit
        ).objective
        problem = PlanningProblem.from_counts(
            settings.cluster, settings.profile, settings.candidates, hist.boundaries, hist.counts
        )
        joint = solve_joint(problem, node_limit=joint_node_limit)
        best = min(joint.objective, decomposed)
        if joint.bound > decomposed:
            raise PlanningError(f"step {k}: joint bound {joint.bound} exceeds decomposed {decomposed}")
        out.append(GapPoint(k, decomposed, best, joint.bound))
    return plan, out


# -- reports -------------------------------------------------------------------


def format_reports(reports: Sequence[SimulationReport], header: str) -> str:
    lines = [f"# {header}", "step,strategy,step_time_s,gpu_seconds,padding_tokens,solve_ms"]
    for rep in reports:
        for s in rep.steps:
            ms = "-" if s.solve_ms is None else f"{s.solve_ms:.3f}"
            lines.append(
                f"{s.step},{rep.strategy},{s.step_time!r},{s.gpu_seconds!r},{s.padding_tokens},{ms}"
            )
    lines.append("")
    lines.append("strategy,steps,mean_step_time_s,std_step_time_s,total_gpu_seconds,plan")
    for rep in reports:
        lines.append(
            f"{rep.strategy},{len(rep.steps)},{rep.mean_step_time!r},{rep.std_step_time!r},"
            f"{rep.gpu_seconds!r},\"{rep.plan}\""
        )
    return "\n".join(lines) + "\n"


def format_gap(plan: DeploymentPlan, points: Sequence[GapPoint], header: str) -> str:
    lines = [
        f"# {header}",
        f"# stage-one plan {plan.notation()}",
        "step,t_decomp_s,t_origin_s,t_origin_bound_s,ratio,ratio_bound",
    ]
    for p in points:
        lines.append(
            f"{p.step},{p.decomposed!r},{p.joint!r},{p.joint_bound!r},{p.ratio!r},{p.ratio_bound!r}"
        )
    return "\n".join(lines) + "\n"
