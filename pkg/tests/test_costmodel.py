import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetplan.configspace import ParallelConfig
from hetplan.costmodel import (
    Coefficients,
    CostModelError,
    CostProfile,
    ProfilingSample,
    atb,
    bucket_costs,
    fit_cost_curve,
    loo_errors,
    micro_time,
    microbatch_schedule,
    read_samples,
    replica_time,
    schedule_time,
    write_samples,
)
from hetplan.fixtures import data_path, profiling_samples, throughput_table

import oracles


def linear_profile(M: int, pp: int = 1, law=(0.0, 1.0, 0.0)) -> tuple[CostProfile, ParallelConfig]:
    cfg = ParallelConfig(1, pp, M)
    return CostProfile({cfg.key: cfg}, {cfg.key: Coefficients(*law)}), cfg


def quadratic_samples(law=(2.0, 3.0, 5.0)):
    a2, a1, a0 = law
    out = []
    for s in (256, 512, 1024, 2048, 4096):
        for b in (1, 2, 4):
            out.append(ProfilingSample(1, 1, b, s, b * (a2 * s * s + a1 * s + a0)))
    return out


def test_exact_quadratic_is_recovered():
    fitted = fit_cost_curve(quadratic_samples()).coeffs[(1, 1)]
    for got, want in zip((fitted.a2, fitted.a1, fitted.a0), (2.0, 3.0, 5.0)):
        assert abs(got - want) / want < 1e-9


def test_time_is_proportional_to_batch():
    profile = fit_cost_curve(quadratic_samples())
    cfg = profile.config(1, 1)
    for s in (256, 1024):
        one = micro_time(profile, cfg, 1, s)
        assert micro_time(profile, cfg, 4, s) == pytest.approx(4 * one, rel=1e-15)
    assert profile.residuals[(1, 1)] < 1e-9


def test_fit_needs_three_lengths():
    rows = [ProfilingSample(2, 1, b, s, 1.0 * b) for s in (256, 512) for b in (1, 2)]
    with pytest.raises(CostModelError, match="<2,1>"):
        fit_cost_curve(rows)


def test_fit_layers_scale_and_memory_bound():
    base = fit_cost_curve(quadratic_samples())
    scaled = fit_cost_curve(quadratic_samples(), layers=32)
    assert scaled.coeffs[(1, 1)].a2 == pytest.approx(32 * base.coeffs[(1, 1)].a2)
    # largest chunk seen: 4 sequences of 4096 tokens
    assert base.config(1, 1).max_seq_len == 16384


def test_fixture_leave_one_out_error_below_ten_percent():
    errors = loo_errors(profiling_samples())
    assert set(errors) == {(1, 1), (2, 1), (1, 2), (4, 1), (2, 2), (1, 4), (8, 1), (4, 2), (2, 4), (1, 8)}
    assert max(errors.values()) < 0.10


def test_bundled_profile_matches_fit():
    bundled = CostProfile.from_csv(data_path("mixture_profile.csv"))
    fitted = fit_cost_curve(read_samples(data_path("profiling_samples.csv")))
    assert bundled.dumps() == fitted.dumps()


def test_fixture_micro_time_matches_table():
    profile = CostProfile.from_csv(data_path("mixture_profile.csv"))
    cfg = profile.config(1, 1)
    want = 2048 / 5.11
    assert abs(micro_time(profile, cfg, 1, 2048) - want) / want < 0.10


def test_fixture_atb_matches_table():
    profile = CostProfile.from_csv(data_path("mixture_profile.csv"))
    assert abs(atb(profile, profile.config(2, 4), 8192) - 3.79) / 3.79 < 0.10


def test_atb_ordering_matches_table():
    profile = CostProfile.from_csv(data_path("mixture_profile.csv"))
    table = throughput_table()
    configs = profile.all_configs()
    for a in configs:
        for b in configs:
            if a.gpus_per_replica != b.gpus_per_replica or a.key >= b.key:
                continue
            for s in sorted({e.seq_len for e in table.entries}):
                ta, tb = table.thruput(a, s), table.thruput(b, s)
                if ta is None or tb is None or abs(ta - tb) < 0.05:
                    continue
                assert (atb(profile, a, s) > atb(profile, b, s)) == (ta > tb), (a, b, s)


def test_micro_time_examples_and_errors():
    profile, cfg = linear_profile(8)
    assert micro_time(profile, cfg, 2, 4) == 8
    assert micro_time(profile, cfg, 0, 4) == 0
    with pytest.raises(CostModelError, match="chunk exceeds memory budget"):
        micro_time(profile, cfg, 3, 4)


def test_replica_time_without_pipeline():
    profile, cfg = linear_profile(8)
    sched = microbatch_schedule(cfg, [5], [4])[0]
    assert (sched.chunk_size, sched.full_chunks, sched.remainder) == (2, 2, 1)
    assert replica_time(profile, cfg, [5], [4]) == 20


def test_replica_time_fixed_length_pipeline():
    # 8 chunks of one sequence, unit time each, 4 stages
    profile, cfg = linear_profile(4, pp=4, law=(0.0, 0.0, 1.0))
    assert replica_time(profile, cfg, [8], [4]) == 8 + 3


def test_replica_time_variable_length_pipeline():
    # bucket A: two chunks of 2 s, bucket B: three chunks of 1 s
    assert schedule_time([2.0, 1.0], [1, 1], [2, 3], 2) == 9


def test_replica_time_rejects_unsupported_bucket():
    profile, cfg = linear_profile(8)
    with pytest.raises(CostModelError, match="bucket exceeds max supported length"):
        replica_time(profile, cfg, [1, 1], [8, 16])


def test_atb_examples():
    # t(b, s) = b * s / (n * c) gives ATB = c everywhere
    c, n = 3.0, 2
    cfg = ParallelConfig(2, 1, 4096)
    profile = CostProfile({cfg.key: cfg}, {cfg.key: Coefficients(0.0, 1 / (n * c), 0.0)})
    for s in (1, 100, 1000, 4096):
        assert atb(profile, cfg, s) == pytest.approx(c, rel=1e-12)
    assert atb(profile, cfg, 4096) == 4096 / (n * micro_time(profile, cfg, 1, 4096))
    with pytest.raises(CostModelError):
        atb(profile, cfg, 4097)


def test_profile_round_trip(tmp_path):
    profile = CostProfile.from_csv(data_path("mixture_profile.csv"))
    profile.to_csv(tmp_path / "p.csv")
    again = CostProfile.from_csv(tmp_path / "p.csv")
    assert again.dumps() == profile.dumps()
    assert again.coeffs == profile.coeffs


def test_samples_round_trip(tmp_path):
    samples = profiling_samples()
    write_samples(samples, tmp_path / "s.csv")
    assert read_samples(tmp_path / "s.csv") == samples


laws = st.tuples(
    st.floats(0, 1e-6, allow_subnormal=False),
    st.floats(1e-6, 1e-2, allow_subnormal=False),
    st.floats(0, 1e-1, allow_subnormal=False),
)


@given(
    laws,
    st.integers(1, 8),
    st.lists(st.integers(0, 40), min_size=1, max_size=5),
)
def test_schedule_matches_formula(law, pp, counts):
    boundaries = [512 * (j + 1) for j in range(len(counts))]
    cfg = ParallelConfig(1, pp, 512 * len(counts))
    profile = CostProfile({cfg.key: cfg}, {cfg.key: Coefficients(*law)})
    units, chunks = bucket_costs(profile, cfg, boundaries)
    got = replica_time(profile, cfg, counts, boundaries)
    assert got == pytest.approx(oracles.replica_time(units, chunks, counts, pp), rel=1e-12)
    # chunk schedule conserves sequences
    for sched, d in zip(microbatch_schedule(cfg, counts, boundaries), counts):
        assert sched.count == d
        assert 0 <= sched.remainder < sched.chunk_size


@given(
    laws,
    st.integers(1, 8),
    st.lists(st.integers(0, 40), min_size=1, max_size=5),
    st.data(),
)
def test_replica_time_monotone(law, pp, counts, data):
    boundaries = [512 * (j + 1) for j in range(len(counts))]
    cfg = ParallelConfig(1, pp, 512 * len(counts))
    profile = CostProfile({cfg.key: cfg}, {cfg.key: Coefficients(*law)})
    j = data.draw(st.integers(0, len(counts) - 1))
    more = list(counts)
    more[j] += data.draw(st.integers(1, 10))
    assert replica_time(profile, cfg, more, boundaries) >= replica_time(profile, cfg, counts, boundaries)


@given(laws, st.lists(st.integers(0, 40), min_size=1, max_size=5))
def test_linear_in_counts_without_pipeline(law, counts):
    boundaries = [512 * (j + 1) for j in range(len(counts))]
    cfg = ParallelConfig(1, 1, 512 * len(counts))
    profile = CostProfile({cfg.key: cfg}, {cfg.key: Coefficients(*law)})
    units, chunks = bucket_costs(profile, cfg, boundaries)
    linear = sum(d / b * (b * c) for d, b, c in zip(counts, chunks, units))
    assert math.isclose(replica_time(profile, cfg, counts, boundaries), linear, rel_tol=1e-12, abs_tol=1e-15)


def test_negative_curvature_falls_back_to_linear():
    rng = np.random.default_rng(0)
    rows = []
    for s in (256, 512, 1024, 2048):
        for b in (1, 2):
            # concave data: the quadratic fit would bend downwards
            rows.append(ProfilingSample(1, 1, b, s, b * (math.sqrt(s) * (1 + 0.01 * rng.random()))))
    co = fit_cost_curve(rows).coeffs[(1, 1)]
    assert co.a2 == 0.0
