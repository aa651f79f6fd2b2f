"""Bundled reference data and the generator that produced it.

Running ``python -m hetplan.fixtures`` rewrites every file under
``hetplan/data``; the outputs are deterministic.
"""

from __future__ import annotations

import math
import statistics
from importlib import resources
from pathlib import Path

import numpy as np

from .configspace import ThroughputEntry, ThroughputTable
from .costmodel import Coefficients, CostProfile, ProfilingSample, fit_cost_curve, write_samples
from .configspace import ParallelConfig
from .workload import Lognormal, TaskSpec, WorkloadSpec, lognormal_sigma

DATA_DIR = Path(__file__).with_name("data")

# Tokens per GPU per second by configuration and sequence length.
# Configurations also appear at every larger GPU count that is a multiple of
# their replica size, with unchanged throughput.
THROUGHPUT = {
    (1, 1): {2048: 5.11},
    (2, 1): {2048: 4.30, 4096: 4.12},
    (1, 2): {2048: 4.88},
    (4, 1): {2048: 3.63, 4096: 3.50, 8192: 3.25},
    (2, 2): {2048: 4.15, 4096: 3.98},
    (1, 4): {2048: 5.03, 4096: 4.78},
    (8, 1): {2048: 2.79, 4096: 2.71, 8192: 2.56, 16384: 2.33},
    (4, 2): {2048: 3.48, 4096: 3.34, 8192: 3.12},
    (2, 4): {2048: 4.27, 4096: 4.10, 8192: 3.79},
    (1, 8): {2048: 4.45, 4096: 4.25},
}
GPU_COLUMNS = {2048: (1, 2, 4, 8), 4096: (2, 4, 8), 8192: (4, 8), 16384: (8,)}

# name: (mean length, skewness, batch size)
TASKS = {
    "databricks-dolly-15k": (207, 7.11, 256),
    "python_code_instructions": (269, 10.01, 128),
    "Evol-Instruct": (702, 6.59, 128),
    "CommitPackFT": (663, 0.79, 128),
    "MathInstruct": (252, 3.03, 128),
    "MetaMathQA": (236, 2.56, 128),
    "NuminaMath-CoT": (543, 1.52, 256),
    "PubMedQA": (371, 0.73, 64),
    "XSum": (526, 7.49, 128),
    "BillSum": (3903, 0.85, 32),
    "cnn_dailymail": (947, 0.89, 256),
    "MeetingBank": (3622, 4.35, 64),
}
MAX_LEN = 16384
Z_999 = 3.090232306167813

# the four-configuration example cluster: <k,1> for k = 1, 2, 4, 8
EXAMPLE_KEYS = ((1, 1), (2, 1), (4, 1), (8, 1))
EXAMPLE_BOUNDARIES = (2048, 4096, 8192, 16384)
EXAMPLE_COUNTS = (196, 62, 16, 4)
EXAMPLE_GPUS = 16

NOISE = 0.02
SEED = 20240611


def data_path(name: str) -> Path:
    return Path(str(resources.files("hetplan").joinpath("data", name)))


def throughput_table() -> ThroughputTable:
    rows = []
    for (tp, pp), cells in THROUGHPUT.items():
        n = tp * pp
        for s, thr in cells.items():
            for gpus in GPU_COLUMNS[s]:
                if gpus >= n:
                    rows.append(ThroughputEntry(tp, pp, gpus, s, thr))
    return ThroughputTable(rows)


def inverse_throughput_law() -> dict[tuple[int, int], tuple[float, float]]:
    """Per configuration, ``1/thruput(s) ~ alpha + gamma * s``.

    Configurations measured at a single length borrow the median slope of
    the others.
    """
    fitted = {}
    for key, cells in THROUGHPUT.items():
        if len(cells) >= 2:
            s = np.array(sorted(cells), dtype=float)
            y = np.array([1.0 / cells[int(x)] for x in s])
            gamma, alpha = np.polyfit(s, y, 1)
            fitted[key] = (float(alpha), float(gamma))
    slope = statistics.median(g for _, g in fitted.values())
    out = {}
    for key, cells in THROUGHPUT.items():
        if key in fitted:
            out[key] = fitted[key]
        else:
            (s, thr), = cells.items()
            out[key] = (1.0 / thr - slope * s, slope)
    return out


def law_coefficients(key: tuple[int, int]) -> Coefficients:
    alpha, gamma = inverse_throughput_law()[key]
    n = key[0] * key[1]
    return Coefficients(gamma / n, alpha / n, 0.0)


def profiling_samples(seed: int = SEED) -> list[ProfilingSample]:
    """Synthetic micro-batch timings consistent with the throughput table."""
    rng = np.random.default_rng(seed)
    out = []
    for key, cells in THROUGHPUT.items():
        tp, pp = key
        n = tp * pp
        top = max(cells)
        co = law_coefficients(key)
        s = 256
        while s <= top:
            for b in (1, 2, 4):
                if b * s > top:
                    continue
                if s in cells:
                    t = b * s / (cells[s] * n)
                else:
                    t = b * co.unit(s)
                t *= 1.0 + NOISE * rng.uniform(-1.0, 1.0)
                out.append(ProfilingSample(tp, pp, b, s, float(t)))
            s *= 2
    return out


def example_profile() -> CostProfile:
    configs, coeffs = {}, {}
    for key, top in zip(EXAMPLE_KEYS, EXAMPLE_BOUNDARIES):
        configs[key] = ParallelConfig(key[0], key[1], top)
        coeffs[key] = law_coefficients(key)
    return CostProfile(configs, coeffs)


def task_distribution(mean: float, skew: float) -> Lognormal:
    """Lognormal with the given mean and skewness, truncated at the power of
    two above its 99.9th percentile (at most ``MAX_LEN``)."""
    sigma = lognormal_sigma(skew)
    mu = math.log(mean) - 0.5 * sigma**2
    q = math.exp(mu + Z_999 * sigma)
    cap = min(MAX_LEN, 1 << max(8, math.ceil(math.log2(q))))
    return Lognormal(float(mean), sigma, cap)


def mixture_workload() -> WorkloadSpec:
    return WorkloadSpec(
        tuple(
            TaskSpec(name, bs, task_distribution(mean, skew))
            for name, (mean, skew, bs) in TASKS.items()
        )
    )


# the decomposition-gap study: three tasks, four buckets, the example profile
GAP_TASKS = ("databricks-dolly-15k", "cnn_dailymail", "MeetingBank")
GAP_R = 4


def gap_workload() -> WorkloadSpec:
    """Short, medium and long task at their full batch sizes."""
    return WorkloadSpec(
        tuple(
            TaskSpec(name, TASKS[name][2], task_distribution(*TASKS[name][:2]))
            for name in GAP_TASKS
        )
    )


def regenerate(out: Path = DATA_DIR) -> None:
    out.mkdir(parents=True, exist_ok=True)
    throughput_table().to_csv(out / "throughput_table.csv")
    samples = profiling_samples()
    write_samples(samples, out / "profiling_samples.csv")
    fit_cost_curve(samples).to_csv(out / "mixture_profile.csv")
    example_profile().to_csv(out / "example_profile.csv")
    mixture_workload().dump(out / "workload_mixture.json")
    gap_workload().dump(out / "workload_gap.json")


if __name__ == "__main__":
    regenerate()
