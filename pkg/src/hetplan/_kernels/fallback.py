"""Pure-Python versions of the hot kernels.

Each function has a twin in ``_core.pyx`` with the same signature and
bit-identical results.
"""

from __future__ import annotations

from itertools import product
from typing import Sequence

INF = float("inf")


def bucket_dp(ends: Sequence[int], counts: Sequence[int], n_buckets: int) -> tuple[int, list[int]]:
    """Group consecutive occupied intervals into ``n_buckets`` buckets with
    minimal cross-interval padding.

    ``ends[k]`` is the upper boundary of the k-th occupied interval and
    ``counts[k]`` the number of sequences in it. Returns the padding and the
    indices of the intervals that close each bucket; among optimal choices the
    lexicographically smallest boundary list wins.
    """
    k_total = len(ends)
    if k_total == 0:
        return 0, []
    nb = min(n_buckets, k_total)
    csum = [0] * (k_total + 1)
    wsum = [0] * (k_total + 1)
    for k in range(k_total):
        csum[k + 1] = csum[k] + counts[k]
        wsum[k + 1] = wsum[k] + counts[k] * ends[k]

    def cost(i: int, e: int) -> int:
        # one bucket holding intervals i..e, padded to ends[e]
        return ends[e] * (csum[e + 1] - csum[i]) - (wsum[e + 1] - wsum[i])

    # suf[j][i]: cheapest way to cover intervals i.. with exactly j buckets
    big = None
    suf = [[big] * (k_total + 1) for _ in range(nb + 1)]
    suf[0][k_total] = 0
    for j in range(1, nb + 1):
        row, prev = suf[j], suf[j - 1]
        for i in range(k_total - j, -1, -1):
            best = big
            for e in range(i, k_total - j + 1):
                tail = prev[e + 1]
                if tail is None:
                    continue
                v = cost(i, e) + tail
                if best is None or v < best:
                    best = v
            row[i] = best
    picks = []
    i = 0
    for j in range(nb, 0, -1):
        target = suf[j][i]
        for e in range(i, k_total - j + 1):
            tail = suf[j - 1][e + 1]
            if tail is not None and cost(i, e) + tail == target:
                picks.append(e)
                i = e + 1
                break
    return suf[nb][0], picks


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _group_time(units, chunks, shares, stages) -> float:
    # mirrors costmodel.schedule_time operation for operation
    compute = 0.0
    bubble = 0.0
    for c, b, q in zip(units, chunks, shares):
        if q == 0:
            continue
        m, rem = divmod(q, b)
        full = b * c
        tail = rem * c
        compute += m * full + tail
        longest = full if m else tail
        if longest > bubble:
            bubble = longest
    return compute + (stages - 1) * bubble


def minimax_enumerate(
    units: Sequence[Sequence[float]],
    chunks: Sequence[Sequence[int]],
    replicas: Sequence[int],
    stages: Sequence[int],
    ranges: Sequence[int],
    demands: Sequence[int],
) -> tuple[float, list[list[int]]]:
    """Exhaustive search over integer dispatches; ties go to the
    lexicographically smallest assignment (group-major order)."""
    n_groups = len(replicas)
    n_buckets = len(demands)
    supporters = [[g for g in range(n_groups) if ranges[g] > j] for j in range(n_buckets)]
    per_bucket = []
    for j in range(n_buckets):
        if demands[j] == 0:
            per_bucket.append([None])
        else:
            per_bucket.append(list(_compositions(demands[j], len(supporters[j]))))
    best_val = INF
    best_d: list[list[int]] | None = None
    for combo in product(*per_bucket):
        d = [[0] * n_buckets for _ in range(n_groups)]
        for j, split in enumerate(combo):
            if split is None:
                continue
            for g, amount in zip(supporters[j], split):
                d[g][j] = amount
        worst = 0.0
        for g in range(n_groups):
            r = ranges[g]
            p = replicas[g]
            shares = [-(-d[g][j] // p) for j in range(r)]
            t = _group_time(units[g][:r], chunks[g][:r], shares, stages[g])
            if t > worst:
                worst = t
        if worst < best_val or (worst == best_val and d < best_d):
            best_val, best_d = worst, d
    if best_d is None:
        best_d = [[0] * n_buckets for _ in range(n_groups)]
        best_val = 0.0
    return best_val, best_d
