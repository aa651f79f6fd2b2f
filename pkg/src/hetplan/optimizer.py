"""Exact minimax assignment of bucketed sequences to replica groups.

Group ``g`` has ``p_g`` identical replicas with ``pp_g`` pipeline stages and
supports the first ``r_g`` buckets. Handing it ``d_gj`` sequences of bucket
``j`` gives every replica ``q_gj = ceil(d_gj / p_g)`` of them, and the group
finishes after

    T_g = sum_j c_gj * q_gj + (pp_g - 1) * max_j c_gj * min(q_gj, b_gj)

seconds (see :func:`hetplan.costmodel.schedule_time`). The solver picks the
integer shares minimizing ``max_g T_g`` subject to covering every bucket.

The search works on the shares ``q`` directly: any ``q`` with
``sum_g p_g q_gj >= B_j`` maps back to a ``d`` with the same or smaller
shares. The concave bubble term is bounded from below by its secant over the
current branching interval, so every LP relaxation is a valid bound, and it
becomes exact once each interval lies on one side of the chunk size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from dataclasses import replace as _replace
from math import comb
from typing import Sequence

import highspy
import numpy as np

from . import _kernels
from .costmodel import schedule_time

NODE_LIMIT = 1_000_000
ORACLE_CAP = 10_000_000
_INT_TOL = 1e-6
_PRUNE_TOL = 1e-9


class OptimizerError(ValueError):
    pass


class InfeasibleError(OptimizerError):
    pass


class OracleTooLarge(OptimizerError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    """One replica group as seen by the solver.

    ``units[j]`` is the time of one sequence of bucket ``j`` and ``chunks[j]``
    the number of such sequences per micro-batch; both cover exactly the
    supported buckets.
    """

    replicas: int
    stages: int
    units: tuple[float, ...]
    chunks: tuple[int, ...]
    label: str = ""

    def __post_init__(self) -> None:
        if self.replicas < 1 or self.stages < 1:
            raise OptimizerError(f"group {self.label or '?'}: replicas and stages must be >= 1")
        if len(self.units) != len(self.chunks):
            raise OptimizerError("units and chunks differ in length")
        if any(b < 1 for b in self.chunks) or any(not c > 0 for c in self.units):
            raise OptimizerError(f"group {self.label or '?'}: invalid costs")

    @property
    def r(self) -> int:
        return len(self.units)

    def time(self, shares: Sequence[int]) -> float:
        return schedule_time(self.units, self.chunks, list(shares)[: self.r], self.stages)


@dataclass(frozen=True)
class MinimaxInstance:
    groups: tuple[GroupSpec, ...]
    demands: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.groups:
            raise OptimizerError("instance has no groups")
        if any(b < 0 for b in self.demands):
            raise OptimizerError("demands must be non-negative")

    def check_feasible(self) -> None:
        widest = max(g.r for g in self.groups)
        for j, b in enumerate(self.demands):
            if b > 0 and j >= widest:
                raise InfeasibleError(
                    f"bucket {j + 1} (demand {b}) is not supported by any group"
                )

    def supporters(self, j: int) -> list[int]:
        return [g for g, grp in enumerate(self.groups) if grp.r > j]

    def shares(self, d: Sequence[Sequence[int]]) -> list[list[int]]:
        return [
            [-(-x // grp.replicas) for x in row] for grp, row in zip(self.groups, d)
        ]

    def evaluate(self, d: Sequence[Sequence[int]]) -> tuple[float, tuple[float, ...]]:
        times = tuple(grp.time(q) for grp, q in zip(self.groups, self.shares(d)))
        return max(times), times

    def oracle_size(self) -> int:
        size = 1
        for j, b in enumerate(self.demands):
            if b:
                k = len(self.supporters(j))
                size *= comb(b + k - 1, k - 1) if k else 0
        return size

    def scaled(self, factor: float) -> "MinimaxInstance":
        return MinimaxInstance(
            tuple(
                GroupSpec(g.replicas, g.stages, tuple(c * factor for c in g.units), g.chunks, g.label)
                for g in self.groups
            ),
            self.demands,
        )


@dataclass(frozen=True)
class MinimaxSolution:
    d: tuple[tuple[int, ...], ...]
    q: tuple[tuple[int, ...], ...]
    objective: float
    group_times: tuple[float, ...]
    nodes: int = 0
    budget_exceeded: bool = False
    trace: tuple[str, ...] = field(default=(), compare=False)
    # proven lower bound on the optimum; equals ``objective`` when optimal
    bound: float = field(default=math.nan, compare=False)

    @property
    def status(self) -> str:
        return "search budget exceeded" if self.budget_exceeded else "optimal"


def _finish(inst: MinimaxInstance, d: list[list[int]], **extra) -> MinimaxSolution:
    obj, times = inst.evaluate(d)
    q = inst.shares(d)
    return MinimaxSolution(
        tuple(tuple(r) for r in d), tuple(tuple(r) for r in q), obj, times, **extra
    )


def _shares_to_d(inst: MinimaxInstance, q: list[list[int]]) -> list[list[int]]:
    # hand out exactly B_j per bucket; trimming only lowers the ceil shares
    d = [[grp.replicas * x for x in row] for grp, row in zip(inst.groups, q)]
    for j, need in enumerate(inst.demands):
        excess = sum(d[g][j] for g in range(len(d))) - need
        for g in reversed(range(len(d))):
            if excess <= 0:
                break
            cut = min(excess, d[g][j])
            d[g][j] -= cut
            excess -= cut
    return d


class _Relaxation:
    """LP relaxation over share variables, rebuilt in place per node."""

    def __init__(self, inst: MinimaxInstance, scale: float):
        self.inst = inst
        R = len(inst.demands)
        self.cols: list[tuple[int, int]] = [
            (g, j)
            for g, grp in enumerate(inst.groups)
            for j in range(min(grp.r, R))
            if inst.demands[j] > 0
        ]
        self.unit = np.array([inst.groups[g].units[j] * scale for g, j in self.cols])
        self.chunk = np.array([inst.groups[g].chunks[j] for g, j in self.cols], dtype=np.int64)
        self.cap = np.array(
            [-(-inst.demands[j] // inst.groups[g].replicas) for g, j in self.cols], dtype=np.int64
        )
        n_q = len(self.cols)
        piped = sorted({g for g, _ in self.cols if inst.groups[g].stages > 1})
        self.wcol = {g: n_q + k for k, g in enumerate(piped)}
        self.tcol = n_q + len(piped)
        inf = highspy.kHighsInf
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("threads", 1)
        n = self.tcol + 1
        lower = np.zeros(n)
        upper = np.full(n, inf)
        upper[:n_q] = self.cap
        cost = np.zeros(n)
        cost[self.tcol] = 1.0
        h.addVars(n, lower, upper)
        h.changeColsCost(n, np.arange(n, dtype=np.int32), cost)
        # coverage rows
        for j, need in enumerate(inst.demands):
            if need == 0:
                continue
            idx = [k for k, (g, jj) in enumerate(self.cols) if jj == j]
            val = [float(inst.groups[self.cols[k][0]].replicas) for k in idx]
            h.addRow(float(need), inf, len(idx), np.array(idx, dtype=np.int32), np.array(val))
        # time rows
        for g, grp in enumerate(inst.groups):
            idx = [k for k, (gg, _) in enumerate(self.cols) if gg == g]
            if not idx:
                continue
            val = [self.unit[k] for k in idx]
            if g in self.wcol:
                idx.append(self.wcol[g])
                val.append(float(grp.stages - 1))
            idx.append(self.tcol)
            val.append(-1.0)
            h.addRow(-inf, 0.0, len(idx), np.array(idx, dtype=np.int32), np.array(val))
        # bubble rows: w_g - a * q >= rhs, coefficients follow the branching box
        self.brow: dict[int, int] = {}
        row = h.getNumRow()
        for k, (g, _) in enumerate(self.cols):
            if g in self.wcol:
                h.addRow(0.0, inf, 2, np.array([self.wcol[g], k], dtype=np.int32), np.array([1.0, 0.0]))
                self.brow[k] = row
                row += 1
        self.h = h
        self.loaded_box: dict[int, tuple[int, int]] = {}
        self.qidx = np.arange(n_q, dtype=np.int32)

    def secant(self, k: int, lo: int, hi: int) -> tuple[float, float]:
        c, b = self.unit[k], int(self.chunk[k])
        if hi <= b:
            return c, 0.0
        if lo >= b:
            return 0.0, c * b
        slope = (b - lo) / (hi - lo)
        return c * slope, c * (lo - slope * lo)

    def solve(
        self, lo: np.ndarray, hi: np.ndarray
    ) -> tuple[float, np.ndarray, np.ndarray] | None:
        h = self.h
        h.changeColsBounds(len(self.qidx), self.qidx, lo.astype(float), hi.astype(float))
        for k, row in self.brow.items():
            box = (int(lo[k]), int(hi[k]))
            if self.loaded_box.get(k) == box:
                continue
            a, rhs = self.secant(k, *box)
            h.changeCoeff(row, k, -a)
            h.changeRowBounds(row, rhs, highspy.kHighsInf)
            self.loaded_box[k] = box
        h.run()
        if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
            return None
        sol = h.getSolution()
        n = len(self.cols)
        x = np.asarray(sol.col_value[:n])
        rc = np.asarray(sol.col_dual[:n])
        return h.getInfo().objective_function_value, x, rc


@dataclass(frozen=True)
class SearchResult:
    """Outcome of a branch-and-bound run against an optional cutoff.

    ``solution`` is None when nothing strictly below the cutoff was found;
    ``bound`` is a proven lower bound on the optimum (at least the cutoff when
    the search finished without an improving solution).
    """

    solution: MinimaxSolution | None
    bound: float
    nodes: int
    budget_exceeded: bool


def solve_minimax(
    instance: MinimaxInstance,
    node_limit: int = NODE_LIMIT,
    cutoff: float | None = None,
    debug: bool = False,
) -> MinimaxSolution | None:
    """Exact minimax dispatch by LP-based branch-and-bound.

    Args:
        instance: groups and per-bucket demands.
        node_limit: abort after this many LP solves and return the incumbent
            flagged ``budget_exceeded``.
        cutoff: when given, only solutions strictly better than this time are
            of interest; returns None if none exists.
        debug: record a textual trace of the search.

    Raises:
        InfeasibleError: a bucket with positive demand has no supporting group.
    """
    return minimax_search(instance, node_limit, cutoff, debug).solution


def minimax_search(
    instance: MinimaxInstance,
    node_limit: int = NODE_LIMIT,
    cutoff: float | None = None,
    debug: bool = False,
) -> SearchResult:
    """Branch-and-bound behind :func:`solve_minimax`, also reporting the
    proven lower bound when the node budget runs out."""
    inst = instance
    inst.check_feasible()
    R = len(inst.demands)
    n_groups = len(inst.groups)
    if sum(inst.demands) == 0 or n_groups == 1:
        d = [[0] * R for _ in range(n_groups)] if n_groups > 1 else [list(inst.demands)]
        sol = _finish(inst, d)
        sol = _replace(sol, bound=sol.objective)
        if cutoff is not None and not sol.objective < cutoff:
            return SearchResult(None, cutoff, 0, False)
        return SearchResult(sol, sol.objective, 0, False)

    # power-of-two normalization keeps every evaluated time an exact multiple
    _, exp = math.frexp(max(u for g in inst.groups for u in g.units))
    scale = math.ldexp(1.0, -exp)
    norm = inst.scaled(scale)
    lp = _Relaxation(norm, 1.0)
    cols = lp.cols
    trace: list[str] = []

    def to_shares(qv: np.ndarray) -> list[list[int]]:
        q = [[0] * R for _ in range(n_groups)]
        for k, (g, j) in enumerate(cols):
            q[g][j] = int(qv[k])
        return q

    def true_time(qv: np.ndarray) -> float:
        q = to_shares(qv)
        return max(grp.time(row) for grp, row in zip(norm.groups, q))

    def round_up(x: np.ndarray, hi: np.ndarray) -> np.ndarray:
        qv = np.minimum(np.ceil(x - _INT_TOL), hi).astype(np.int64)
        for j, need in enumerate(inst.demands):
            if need == 0:
                continue
            ks = [k for k, (_, jj) in enumerate(cols) if jj == j]
            while sum(norm.groups[cols[k][0]].replicas * qv[k] for k in ks) < need:
                grow = [k for k in ks if qv[k] < hi[k]]
                if not grow:
                    return None
                k = min(grow, key=lambda k: (lp.unit[k] / norm.groups[cols[k][0]].replicas, k))
                qv[k] += 1
        return qv

    caps = {(g, j): int(lp.cap[k]) for k, (g, j) in enumerate(cols)}

    def polish(qv: np.ndarray) -> np.ndarray:
        q = _descend(norm, to_shares(qv), caps)
        return np.array([q[g][j] for g, j in cols], dtype=np.int64)

    best_val = math.inf if cutoff is None else cutoff * scale * (1 + _PRUNE_TOL)
    best_q: np.ndarray | None = None
    nodes = 0
    exceeded = False
    # each open node carries its parent's bound
    stack = [(np.zeros(len(cols), dtype=np.int64), lp.cap.copy(), 0, -math.inf)]
    while stack:
        lo, hi, depth, parent = stack.pop()
        if nodes >= node_limit:
            exceeded = True
            stack.append((lo, hi, depth, parent))
            break
        nodes += 1
        res = lp.solve(lo, hi)
        if res is None:
            if debug:
                trace.append(f"node {nodes} depth {depth} infeasible")
            continue
        bound, x, rc = res
        if bound >= best_val * (1 - _PRUNE_TOL):
            if debug:
                trace.append(f"node {nodes} depth {depth} bound {bound!r} pruned")
            continue
        if best_val < math.inf:
            lo, hi = _tighten(lo, hi, x, rc, best_val * (1 - _PRUNE_TOL) - bound)
        guess = round_up(x, hi)
        if guess is not None:
            t = true_time(guess)
            if t < best_val:
                guess = polish(guess)
                t = true_time(guess)
                best_val, best_q = t, guess
                if debug:
                    trace.append(f"node {nodes} depth {depth} incumbent {t!r}")
        frac = np.abs(x - np.round(x))
        if frac.max() > _INT_TOL:
            # most fractional share; argmax returns the lowest (g, j) on ties
            k = int(np.argmax(np.round(0.5 - np.abs(x - np.floor(x) - 0.5), 9)))
            down = int(np.floor(x[k]))
            left_hi, right_lo = hi.copy(), lo.copy()
            left_hi[k] = down
            right_lo[k] = down + 1
            children = [(lo, left_hi), (right_lo, hi)]
            if x[k] - down >= 0.5:
                children.reverse()
            if debug:
                trace.append(f"node {nodes} depth {depth} bound {bound!r} branch q{cols[k]} at {x[k]!r}")
        else:
            qv = np.round(x).astype(np.int64)
            t = true_time(qv) if round_up(x, hi) is not None else math.inf
            if t <= bound * (1 + _PRUNE_TOL) + 1e-12:
                if t < best_val:
                    best_val, best_q = t, qv
                continue
            # integral but the bubble secant is loose: split at the chunk size
            gaps = []
            for k in lp.brow:
                b = int(lp.chunk[k])
                if lo[k] < b < hi[k]:
                    a, rhs = lp.secant(k, int(lo[k]), int(hi[k]))
                    gaps.append((lp.unit[k] * min(qv[k], b) - (a * qv[k] + rhs), -k))
            if not gaps or max(gaps)[0] <= 0:
                if t < best_val:
                    best_val, best_q = t, qv
                continue
            k = -max(gaps)[1]
            b = int(lp.chunk[k])
            left_hi, right_lo = hi.copy(), lo.copy()
            left_hi[k] = b
            right_lo[k] = b + 1
            children = [(lo, left_hi), (right_lo, hi)]
            if qv[k] > b:
                children.reverse()
            if debug:
                trace.append(f"node {nodes} depth {depth} bound {bound!r} split q{cols[k]} at chunk {b}")
        for clo, chi in reversed(children):
            stack.append((clo, chi, depth + 1, bound))

    ceiling = best_val if best_q is not None else (math.inf if cutoff is None else cutoff * scale)
    proven = min([ceiling * (1 - _PRUNE_TOL)] + [node[3] for node in stack]) / scale
    if best_q is None:
        if cutoff is not None:
            return SearchResult(None, max(proven, 0.0), nodes, exceeded)
        raise OptimizerError("search budget exceeded before any feasible dispatch was found")
    d = _shares_to_d(inst, to_shares(best_q))
    sol = _finish(inst, d, nodes=nodes, budget_exceeded=exceeded, trace=tuple(trace))
    sol = _replace(sol, bound=min(proven, sol.objective) if exceeded else sol.objective)
    if cutoff is not None and not sol.objective < cutoff:
        return SearchResult(None, max(sol.bound, 0.0), nodes, exceeded)
    return SearchResult(sol, sol.bound, nodes, exceeded)


def _tighten(lo, hi, x, rc, slack):
    """Reduced-cost bound tightening: moving a share off its bound by ``k``
    raises the node's bound by at least ``k * |rc|``."""
    if slack <= 0:
        return lo, hi
    lo, hi = lo.copy(), hi.copy()
    at_lo = (rc > 1e-9) & (x <= lo + _INT_TOL)
    if at_lo.any():
        room = np.floor(slack / rc[at_lo] + 1e-9).astype(np.int64)
        hi[at_lo] = np.minimum(hi[at_lo], lo[at_lo] + room)
    at_hi = (rc < -1e-9) & (x >= hi - _INT_TOL)
    if at_hi.any():
        room = np.floor(slack / -rc[at_hi] + 1e-9).astype(np.int64)
        lo[at_hi] = np.maximum(lo[at_hi], hi[at_hi] - room)
    return lo, hi


def _descend(
    inst: MinimaxInstance, q: list[list[int]], caps: dict[tuple[int, int], int]
) -> list[list[int]]:
    """Greedy repair: take one share off a slowest group, covering any
    shortfall from another group, while the sorted group times improve."""
    groups = inst.groups
    times = [grp.time(row) for grp, row in zip(groups, q)]

    def key(ts):
        return sorted(ts, reverse=True)

    while True:
        cur = key(times)
        top = cur[0]
        best = None
        for g, grp in enumerate(groups):
            if times[g] != top:
                continue
            for j in range(min(grp.r, len(inst.demands))):
                if q[g][j] == 0:
                    continue
                q[g][j] -= 1
                t_g = grp.time(q[g])
                short = inst.demands[j] - sum(
                    groups[h].replicas * q[h][j] for h in range(len(groups)) if groups[h].r > j
                )
                options = [(None, 0)] if short <= 0 else []
                if short > 0:
                    for h, other in enumerate(groups):
                        if h == g or other.r <= j:
                            continue
                        add = -(-short // other.replicas)
                        if q[h][j] + add <= caps[(h, j)]:
                            options.append((h, add))
                for h, add in options:
                    trial = list(times)
                    trial[g] = t_g
                    if h is not None:
                        q[h][j] += add
                        trial[h] = groups[h].time(q[h])
                        q[h][j] -= add
                    k = key(trial)
                    if k < cur and (best is None or k < best[0]):
                        best = (k, g, j, h, add, trial)
                q[g][j] += 1
        if best is None:
            return q
        _, g, j, h, add, times = best
        q[g][j] -= 1
        if h is not None:
            q[h][j] += add


def brute_force_minimax(instance: MinimaxInstance, cap: int = ORACLE_CAP) -> MinimaxSolution:
    """Exhaustive reference solver for small instances.

    Ties go to the lexicographically smallest ``d`` in group-major order.

    Raises:
        OracleTooLarge: more than ``cap`` assignments would be enumerated.
    """
    inst = instance
    inst.check_feasible()
    if inst.oracle_size() > cap:
        raise OracleTooLarge("instance too large for oracle")
    R = len(inst.demands)
    ranges = [min(g.r, R) for g in inst.groups]
    _, d = _kernels.minimax_enumerate(
        [list(g.units) for g in inst.groups],
        [list(g.chunks) for g in inst.groups],
        [g.replicas for g in inst.groups],
        [g.stages for g in inst.groups],
        ranges,
        list(inst.demands),
    )
    return _finish(inst, d)
