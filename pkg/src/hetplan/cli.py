"""Command-line front end.

Every command reads its inputs from files and flags only, writes one text
artifact to stdout (or ``--output``) and exits with

    0  success
    1  bad input (missing file, malformed data, out-of-range flag)
    2  infeasible (a bucket no configuration can hold, re-plan required)
    3  oracle cap exceeded
    64 usage error (unknown command or flag)
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bucketing import (
    DEFAULT_MULTIPLIER,
    DEFAULT_R,
    DEFAULT_STEP,
    BoundaryGrid,
    Bucketing,
    BatchHistogram,
    bucket_counts,
    dynamic_buckets,
    histogram,
    padding_cost,
    sample_boundaries,
)
from .configspace import (
    ClusterSpec,
    ParallelConfig,
    ThroughputTable,
    check_partial_order,
    format_candidates,
    parse_candidates,
    propose_candidates,
)
from .costmodel import CostProfile, fit_cost_curve, loo_errors, read_samples
from .dispatcher import dispatch_balanced, dispatch_by_length, format_assignments
from .fixtures import EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS, EXAMPLE_GPUS, GAP_R, data_path
from .optimizer import NODE_LIMIT, InfeasibleError, OracleTooLarge
from .planner import (
    DEFAULT_THRESHOLD,
    JOINT_PLAN_CAP,
    DeploymentPlan,
    OracleCapExceeded,
    PlanningProblem,
    plan_deployment,
    solve_joint,
)
from .simulator import (
    DISPATCH_NODE_LIMIT,
    JOINT_NODE_LIMIT,
    STRATEGIES,
    Settings,
    decomposition_gap,
    format_gap,
    format_reports,
    simulate,
)
from .workload import WorkloadSpec

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_CAP, EXIT_USAGE = 0, 1, 2, 3, 64
MAX_LEN = 16384

# bundled inputs selectable with --fixture
FIXTURES = {
    "example": {"profile": "example_profile.csv", "gpus": EXAMPLE_GPUS},
    "mixture": {
        "profile": "mixture_profile.csv",
        "table": "throughput_table.csv",
        "workload": "workload_mixture.json",
        "gpus": 16,
    },
    "gap": {
        "profile": "example_profile.csv",
        "workload": "workload_gap.json",
        "gpus": 16,
        "R": GAP_R,
    },
}


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    """Resolved inputs of one command."""

    command: str
    samples: Path | None = None
    table: Path | None = None
    profile: Path | None = None
    workload: Path | None = None
    candidates: Path | None = None
    gpus: int | None = None
    R: int = DEFAULT_R
    grid_step: int = DEFAULT_STEP
    max_len: int = MAX_LEN
    seed: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    multiplier: int = DEFAULT_MULTIPLIER
    steps: int = 100
    prune: bool = True
    output: Path | None = None

    def validate(self) -> None:
        for name in ("samples", "table", "profile", "workload", "candidates"):
            path = getattr(self, name)
            if path is not None and not path.is_file():
                raise InputError(f"{name} file not found: {path}")
        if self.gpus is not None and self.gpus < 1:
            raise InputError("--gpus must be >= 1")
        if self.R < 1:
            raise InputError("--R must be >= 1")
        if self.grid_step < 1 or self.max_len % self.grid_step:
            raise InputError(f"--grid-step must divide {self.max_len}")
        if not 0 <= self.threshold:
            raise InputError("--threshold must be >= 0")
        if self.multiplier < 1:
            raise InputError("--multiplier must be >= 1")
        if self.steps < 1:
            raise InputError("--steps must be >= 1")

    def need(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            flags = ", ".join("--" + n.replace("_", "-") for n in missing)
            raise InputError(f"{self.command} requires {flags} (or --fixture)")

    @property
    def grid(self) -> BoundaryGrid:
        return BoundaryGrid.uniform(self.max_len, self.grid_step)


def _config(args: argparse.Namespace) -> RunConfig:
    fixture = FIXTURES.get(getattr(args, "fixture", None) or "", {})

    def path(name: str) -> Path | None:
        given = getattr(args, name, None)
        if given is not None:
            return Path(given)
        return data_path(fixture[name]) if name in fixture else None

    cfg = RunConfig(
        command=args.command,
        samples=path("samples"),
        table=path("table"),
        profile=path("profile"),
        workload=path("workload"),
        candidates=path("candidates"),
        gpus=fixture.get("gpus") if getattr(args, "gpus", None) is None else args.gpus,
        R=fixture.get("R", DEFAULT_R) if getattr(args, "R", None) is None else args.R,
        grid_step=getattr(args, "grid_step", DEFAULT_STEP),
        seed=getattr(args, "seed", None),
        threshold=getattr(args, "threshold", DEFAULT_THRESHOLD),
        multiplier=getattr(args, "multiplier", DEFAULT_MULTIPLIER),
        steps=getattr(args, "steps", 100),
        prune=not getattr(args, "no_prune", False),
        output=Path(args.output) if getattr(args, "output", None) else None,
    )
    cfg.validate()
    return cfg


# -- shared input handling -------------------------------------------------------


def _ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise InputError(f"{what} must be comma-separated integers: {text!r}") from None


def _read_lengths(path: str) -> np.ndarray:
    text = Path(path).read_text() if path != "-" else sys.stdin.read()
    try:
        values = [int(x) for x in text.replace(",", " ").split() if not x.startswith("#")]
    except ValueError as exc:
        raise InputError(f"{path}: lengths must be integers ({exc})") from None
    if not values:
        raise InputError(f"{path}: no sequence lengths")
    return np.asarray(values, dtype=np.int64)


def _candidates(cfg: RunConfig, profile: CostProfile) -> tuple[ParallelConfig, ...]:
    """Configurations the planner may deploy.

    An explicit candidate file wins; otherwise a throughput table proposes
    candidates unless pruning is off, in which case every profiled
    configuration is eligible.
    """
    if cfg.candidates is not None:
        chosen = parse_candidates(cfg.candidates.read_text())
    elif cfg.table is not None and cfg.prune:
        chosen = propose_candidates(ThroughputTable.from_csv(cfg.table))
    else:
        return tuple(profile.all_configs())
    missing = [c.label() for c in chosen if c not in profile]
    if missing:
        raise InputError(f"candidates lack a cost profile: {', '.join(missing)}")
    return tuple(profile.config(*c.key) for c in chosen)


def _settings(cfg: RunConfig, profile: CostProfile, node_limit: int, timing: bool = False) -> Settings:
    cluster = ClusterSpec(cfg.gpus)
    return Settings(
        cluster,
        profile,
        _candidates(cfg, profile),
        cfg.grid,
        R=cfg.R,
        multiplier=cfg.multiplier,
        threshold=cfg.threshold,
        node_limit=node_limit,
        timing=timing,
    )


def _batch(args: argparse.Namespace, cfg: RunConfig) -> BatchHistogram:
    """Concrete per-bucket counts from --lengths or --boundaries/--counts."""
    if getattr(args, "lengths", None):
        lengths = _read_lengths(args.lengths)
        if args.boundaries:
            bucketing = Bucketing(_ints(args.boundaries, "--boundaries"))
        else:
            bucketing = dynamic_buckets(histogram(lengths, cfg.grid), cfg.R)
        return bucket_counts(lengths, bucketing)
    if args.boundaries and args.counts:
        bounds = _ints(args.boundaries, "--boundaries")
        counts = _ints(args.counts, "--counts")
        if len(bounds) != len(counts):
            raise InputError("--boundaries and --counts differ in length")
        return BatchHistogram(Bucketing(bounds).boundaries, counts)
    if getattr(args, "fixture", None) == "example":
        return BatchHistogram(EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS)
    raise InputError(f"{args.command} needs --lengths or --boundaries with --counts")


def _header(cfg: RunConfig, extra: str = "") -> str:
    seed = "-" if cfg.seed is None else cfg.seed
    text = f"# hetplan {__version__} {cfg.command} seed={seed}"
    return text + (f" {extra}" if extra else "") + "\n"


# -- commands ----------------------------------------------------------------------


def cmd_fit(args, cfg: RunConfig) -> str:
    cfg.need("samples")
    samples = read_samples(cfg.samples)
    profile = fit_cost_curve(samples, layers=args.layers)
    out = _header(cfg, f"layers={args.layers}")
    if args.loo:
        for (tp, pp), err in sorted(loo_errors(samples).items()):
            out += f"# loo <{tp},{pp}> {err:.4f}\n"
    return out + profile.dumps()


def cmd_propose(args, cfg: RunConfig) -> str:
    cfg.need("table")
    table = ThroughputTable.from_csv(cfg.table)
    out = _header(cfg)
    for v in check_partial_order(table):
        out += f"# order violation: {v}\n"
    return out + format_candidates(propose_candidates(table))


def cmd_bucketize(args, cfg: RunConfig) -> str:
    if args.lengths:
        lengths = _read_lengths(args.lengths)
        bucketing = dynamic_buckets(histogram(lengths, cfg.grid), cfg.R)
        hist = bucket_counts(lengths, bucketing, with_fractions=True)
        total = padding_cost(lengths, bucketing)
    else:
        cfg.need("workload")
        if cfg.seed is None:
            raise InputError("bucketize from a workload needs --seed")
        workload = WorkloadSpec.load(cfg.workload)
        bucketing, hist = sample_boundaries(workload, cfg.multiplier, cfg.R, cfg.grid, cfg.seed)
        total = bucketing.total_padding
    lines = [
        f"boundaries={bucketing.format()}",
        f"cross_padding={bucketing.cross_padding}",
        f"total_padding={total}",
        "bucket,boundary,count,fraction",
    ]
    for j, (b, c, f) in enumerate(zip(hist.boundaries, hist.counts, hist.fractions)):
        lines.append(f"{j + 1},{b},{c},{f!r}")
    return _header(cfg, f"R={cfg.R} grid_step={cfg.grid_step}") + "\n".join(lines) + "\n"


def _plan_problem(args, cfg: RunConfig, profile: CostProfile) -> PlanningProblem:
    candidates = _candidates(cfg, profile)
    cluster = ClusterSpec(cfg.gpus)
    if cfg.workload is not None and not (args.boundaries or args.lengths):
        if cfg.seed is None:
            raise InputError("planning from a workload needs --seed")
        workload = WorkloadSpec.load(cfg.workload)
        bucketing, hist = sample_boundaries(workload, cfg.multiplier, cfg.R, cfg.grid, cfg.seed)
        return PlanningProblem(
            cluster,
            profile,
            candidates,
            bucketing.boundaries,
            workload.batch_size,
            fractions=hist.fractions,
            longest=workload.max_length(cfg.max_len),
        )
    hist = _batch(args, cfg)
    return PlanningProblem.from_counts(cluster, profile, candidates, hist.boundaries, hist.counts)


def cmd_plan(args, cfg: RunConfig) -> str:
    cfg.need("profile", "gpus")
    profile = CostProfile.from_csv(cfg.profile)
    problem = _plan_problem(args, cfg, profile)
    out = plan_deployment(
        problem,
        threshold=cfg.threshold,
        prune=cfg.prune,
        workers=args.workers,
        node_limit=args.node_limit,
    )
    note = f"plans_considered={out.considered} plans_solved={out.solved}"
    if not out.exact:
        note += f" lower_bound_s={out.bound!r}"
    return _header(cfg, note) + out.plan.format()


def cmd_dispatch(args, cfg: RunConfig) -> str:
    cfg.need("profile")
    profile = CostProfile.from_csv(cfg.profile)
    plan = DeploymentPlan.parse(Path(args.plan).read_text())
    hist = _batch(args, cfg)
    if args.mode == "by-length":
        dispatch = dispatch_by_length(plan, hist, profile)
    else:
        dispatch = dispatch_balanced(plan, hist, profile, node_limit=args.node_limit)
    return _header(cfg, f"mode={args.mode}") + dispatch.format() + format_assignments(dispatch, profile)


def cmd_simulate(args, cfg: RunConfig) -> str:
    cfg.need("profile", "workload", "gpus")
    profile = CostProfile.from_csv(cfg.profile)
    workload = WorkloadSpec.load(cfg.workload)
    settings = _settings(cfg, profile, args.node_limit, args.timing)
    strategies = STRATEGIES if "all" in args.strategy else tuple(dict.fromkeys(args.strategy))
    reports = [simulate(workload, settings, s, cfg.steps, cfg.seed) for s in strategies]
    head = f"steps={cfg.steps} gpus={cfg.gpus} R={cfg.R}"
    return _header(cfg).rstrip("\n") + " " + head + "\n" + format_reports(reports, "report")


def cmd_gap(args, cfg: RunConfig) -> str:
    cfg.need("profile", "workload", "gpus")
    profile = CostProfile.from_csv(cfg.profile)
    workload = WorkloadSpec.load(cfg.workload)
    settings = _settings(cfg, profile, args.node_limit)
    plan, points = decomposition_gap(
        workload, settings, cfg.steps, cfg.seed or 0, joint_node_limit=args.joint_node_limit
    )
    head = f"steps={cfg.steps} gpus={cfg.gpus} R={cfg.R}"
    return _header(cfg, head) + format_gap(plan, points, "decomposition gap")


def cmd_oracle(args, cfg: RunConfig) -> str:
    cfg.need("profile", "gpus")
    profile = CostProfile.from_csv(cfg.profile)
    hist = _batch(args, cfg)
    problem = PlanningProblem.from_counts(
        ClusterSpec(cfg.gpus), profile, _candidates(cfg, profile), hist.boundaries, hist.counts
    )
    out = solve_joint(problem, cap=args.cap, workers=args.workers, node_limit=args.node_limit)
    note = f"plans_considered={out.considered} objective_s={out.objective!r}"
    if not out.exact:
        note += f" lower_bound_s={out.bound!r}"
    return _header(cfg, note) + out.plan.format()


COMMANDS = {
    "fit": cmd_fit,
    "propose": cmd_propose,
    "bucketize": cmd_bucketize,
    "plan": cmd_plan,
    "dispatch": cmd_dispatch,
    "simulate": cmd_simulate,
    "gap": cmd_gap,
    "oracle": cmd_oracle,
}


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("-o", "--output", help="write here instead of stdout")
        return p

    def inputs(p, *names):
        if "fixture" in names:
            p.add_argument("--fixture", choices=sorted(FIXTURES), help="use bundled inputs")
        if "profile" in names:
            p.add_argument("--profile", help="cost profile CSV (from `fit`)")
            p.add_argument("--gpus", type=int, help="GPUs in the cluster")
            p.add_argument("--table", help="throughput table CSV used to propose candidates")
            p.add_argument("--candidates", help="explicit candidate list (from `propose`)")
        if "workload" in names:
            p.add_argument("--workload", help="workload JSON")
        if "batch" in names:
            p.add_argument("--lengths", help="file of sequence lengths ('-' for stdin)")
            p.add_argument("--boundaries", help="bucket boundaries, e.g. 2048,4096")
            p.add_argument("--counts", help="sequences per bucket, e.g. 196,62")

    def bucketing(p):
        p.add_argument("--R", type=int, help="number of buckets (default 16, 4 for the gap fixture)")
        p.add_argument("--grid-step", type=int, default=DEFAULT_STEP, help="grid spacing (default 256)")
        p.add_argument(
            "--multiplier", type=int, default=DEFAULT_MULTIPLIER,
            help="sampled batches for stage-one boundaries (default 100)",
        )

    def search(p, default=NODE_LIMIT):
        p.add_argument("--node-limit", type=int, default=default, help="branch-and-bound node budget")
        p.add_argument("--workers", type=int, default=1, help="plans solved concurrently")

    p = command("fit", "fit per-sequence cost curves to profiling samples")
    p.add_argument("--samples", required=True, help="profiling samples CSV")
    p.add_argument("--layers", type=int, default=1, help="scale single-layer timings (default 1)")
    p.add_argument("--loo", action="store_true", help="report leave-one-out errors")

    p = command("propose", "propose candidate configurations from a throughput table")
    p.add_argument("--table", required=True, help="throughput table CSV")

    p = command("bucketize", "choose bucket boundaries minimizing padding")
    inputs(p, "fixture", "workload")
    p.add_argument("--lengths", help="file of sequence lengths ('-' for stdin)")
    p.add_argument("--seed", type=int)
    bucketing(p)

    p = command("plan", "choose replica counts per configuration")
    inputs(p, "fixture", "profile", "workload", "batch")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="lower-bound filter (default 0.15)")
    p.add_argument("--no-prune", action="store_true", help="skip candidate proposal and plan filtering")
    bucketing(p)
    search(p)

    p = command("dispatch", "assign one batch to the replicas of a plan")
    inputs(p, "fixture", "profile", "batch")
    p.add_argument("--plan", required=True, help="plan file (from `plan`)")
    p.add_argument("--mode", choices=("balanced", "by-length"), default="balanced")
    bucketing(p)
    search(p)

    p = command("simulate", "simulate training steps under one or more strategies")
    inputs(p, "fixture", "profile", "workload")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument(
        "--strategy", action="append", choices=STRATEGIES + ("all",), default=None,
        help="repeatable; default balanced",
    )
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--no-prune", action="store_true", help="skip candidate proposal and plan filtering")
    p.add_argument("--timing", action="store_true", help="record solver wall time (not reproducible)")
    bucketing(p)
    search(p, DISPATCH_NODE_LIMIT)

    p = command("gap", "per-step decomposed versus joint optimum")
    inputs(p, "fixture", "profile", "workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--no-prune", action="store_true", help="skip candidate proposal and plan filtering")
    p.add_argument("--joint-node-limit", type=int, default=JOINT_NODE_LIMIT)
    bucketing(p)
    search(p, DISPATCH_NODE_LIMIT)

    p = command("oracle", "joint optimum over every plan for one batch")
    inputs(p, "fixture", "profile", "batch")
    p.add_argument("--cap", type=int, default=JOINT_PLAN_CAP, help="abort beyond this many plans")
    bucketing(p)
    search(p)
    return parser


def run(argv: Sequence[str] | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command == "simulate" and not args.strategy:
        args.strategy = ["balanced"]
    try:
        cfg = _config(args)
        text = COMMANDS[args.command](args, cfg)
    except OracleCapExceeded as exc:
        print(f"hetplan: {exc}", file=sys.stderr)
        return EXIT_CAP
    except OracleTooLarge as exc:
        print(f"hetplan: {exc}", file=sys.stderr)
        return EXIT_CAP
    except InfeasibleError as exc:
        print(f"hetplan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"hetplan: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if cfg.output is not None:
        cfg.output.write_text(text)
    else:
        stdout.write(text)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
