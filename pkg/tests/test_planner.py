import random
import pytest

from hetplan.configspace import ClusterSpec, ParallelConfig
from hetplan.costmodel import Coefficients, CostProfile, replica_time
from hetplan.fixtures import EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS, EXAMPLE_GPUS, data_path
from hetplan.optimizer import brute_force_minimax
from hetplan.planner import (
    DeploymentPlan,
    OracleCapExceeded,
    PlanningError,
    PlanningProblem,
    UncoverableError,
    bound_value,
    enumerate_plans,
    filter_plans,
    length_based_assignment,
    lower_bound,
    make_instance,
    plan_deployment,
    replan_on_change,
    robust_ceil,
    solve_joint,
)

import oracles
from generators import random_problem


def example_profile():
    return CostProfile.from_csv(data_path("example_profile.csv"))


def example_problem(gpus=EXAMPLE_GPUS, counts=EXAMPLE_COUNTS):
    profile = example_profile()
    return PlanningProblem.from_counts(
        ClusterSpec(gpus), profile, profile.all_configs(), EXAMPLE_BOUNDARIES, counts
    )


def test_plan_format_round_trip():
    profile = example_profile()
    plan = DeploymentPlan(tuple(profile.all_configs()), (4, 2, 0, 1), 14828.96)
    text = plan.format()
    assert "# plan <1,1>x4 <2,1>x2 <8,1>x1" in text
    again = DeploymentPlan.parse(text)
    assert again == plan and again.expected_time == plan.expected_time
    assert plan.gpus_used == 16
    with pytest.raises(PlanningError):
        DeploymentPlan.parse("tp,pp\n1,x,3,4\n")


def test_robust_ceil():
    assert robust_ceil(0.1 * 30) == 3
    assert robust_ceil(3.2) == 4
    assert robust_ceil(0.0) == 0


def test_enumeration_on_four_gpus():
    profile = example_profile()
    # n = {1, 2, 4} with r = {1, 2, 2} against two buckets
    plans = enumerate_plans(ClusterSpec(4), profile.all_configs()[:3], (2048, 4096))
    assert sorted(p.replicas for p in plans) == sorted([(0, 0, 1), (2, 1, 0), (0, 2, 0)])


def test_single_candidate_single_plan():
    cfg = ParallelConfig(4, 1, 8192)
    plans = enumerate_plans(ClusterSpec(4), [cfg], (8192,))
    assert [p.replicas for p in plans] == [(1,)]


def test_enumeration_maximal_subset_of_all():
    profile = example_profile()
    cl = ClusterSpec(8)
    every = enumerate_plans(cl, profile.all_configs(), (2048, 4096), maximal=False)
    maximal = enumerate_plans(cl, profile.all_configs(), (2048, 4096))
    assert {p.replicas for p in maximal} <= {p.replicas for p in every}
    assert all(p.gpus_used == 8 for p in maximal)
    assert len(every) == len(set(p.replicas for p in every))
    # brute count of vectors within budget that deploy a config holding 4K
    want = 0
    for v in oracles.all_plans(8, [1, 2, 4, 8]):
        if any(v[1:]):
            want += 1
    assert len(every) == want


def test_enumeration_at_sixteen_gpus_covers():
    profile = example_profile()
    plans = enumerate_plans(ClusterSpec(16), profile.all_configs(), EXAMPLE_BOUNDARIES)
    assert plans and all(p.replicas[3] >= 1 for p in plans)
    assert all(p.gpus_used == 16 for p in plans)


def test_uncoverable():
    profile = example_profile()
    with pytest.raises(UncoverableError, match="longest bucket uncoverable"):
        enumerate_plans(ClusterSpec(16), profile.all_configs()[:2], EXAMPLE_BOUNDARIES)


def test_lower_bound_formula():
    assert bound_value([10.0], [16]) == 10.0
    assert bound_value([10.0, 1.0], [1, 8]) == 2.0


def test_lower_bound_uses_length_based_times():
    profile = example_profile()
    plan = DeploymentPlan(tuple(profile.all_configs()), (4, 2, 0, 1))
    est = lower_bound(plan, EXAMPLE_COUNTS, profile, EXAMPLE_BOUNDARIES)
    assert est.gpus == (4, 4, 8)
    d = length_based_assignment(plan, profile, EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS)
    for row, (_, cfg, p), t in zip(d, plan.deployed(), est.times):
        shares = [oracles.ceil_div(x, p) for x in row]
        assert t == pytest.approx(replica_time(profile, cfg, shares, EXAMPLE_BOUNDARIES), rel=1e-12)
    assert est.value == pytest.approx((4 * est.times[0] + 4 * est.times[1] + 8 * est.times[2]) / 16)


def test_lower_bound_between_group_times():
    profile = example_profile()
    for plan in enumerate_plans(ClusterSpec(16), profile.all_configs(), EXAMPLE_BOUNDARIES):
        est = lower_bound(plan, EXAMPLE_COUNTS, profile, EXAMPLE_BOUNDARIES)
        assert min(est.times) <= est.value <= max(est.times)


def test_filter_threshold():
    plans = [DeploymentPlan((ParallelConfig(1, 1, 512),), (k,)) for k in (1, 2, 3)]
    kept = filter_plans(plans, [1.0, 1.14, 1.16], 0.15)
    assert [p.replicas for p in kept] == [(1,), (2,)]
    with pytest.raises(PlanningError):
        filter_plans(plans, [1.0], 0.15)


def test_example_plan():
    out = plan_deployment(example_problem())
    assert out.plan.replicas == (4, 2, 0, 1)
    assert out.exact
    # the reported time is the cost model's step time of the chosen dispatch
    inst, _ = make_instance(out.plan, example_profile(), EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS)
    assert out.objective == inst.evaluate([list(r) for r in out.dispatch.d])[0]


def test_example_plan_matches_joint_oracle():
    problem = example_problem()
    joint = solve_joint(problem)
    assert joint.plan.replicas == (4, 2, 0, 1)
    assert joint.objective == plan_deployment(problem, prune=False).objective


def test_fractions_match_counts():
    profile = example_profile()
    total = sum(EXAMPLE_COUNTS)
    problem = PlanningProblem(
        ClusterSpec(16), profile, tuple(profile.all_configs()), EXAMPLE_BOUNDARIES, total,
        fractions=tuple(c / total for c in EXAMPLE_COUNTS),
    )
    assert problem.demands() == EXAMPLE_COUNTS
    assert plan_deployment(problem).plan.replicas == (4, 2, 0, 1)


def test_problem_validation():
    profile = example_profile()
    cl = ClusterSpec(16)
    cands = tuple(profile.all_configs())
    with pytest.raises(PlanningError):
        PlanningProblem(cl, profile, cands, EXAMPLE_BOUNDARIES, 10)
    with pytest.raises(PlanningError):
        PlanningProblem(cl, profile, cands, EXAMPLE_BOUNDARIES, 10, fractions=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(PlanningError):
        PlanningProblem(cl, profile, (), EXAMPLE_BOUNDARIES, 10, counts=EXAMPLE_COUNTS)


@pytest.mark.parametrize("seed", range(5))
def test_two_stage_equals_joint_without_pruning(seed):
    rng = random.Random(seed)
    for _ in range(10):
        problem = random_problem(rng)
        try:
            joint = solve_joint(problem)
        except UncoverableError:
            continue
        two = plan_deployment(problem, prune=False)
        assert two.objective == joint.objective
        assert plan_deployment(problem).objective >= joint.objective


def test_joint_matches_brute_force_over_plans():
    rng = random.Random(99)
    for _ in range(15):
        problem = random_problem(rng)
        try:
            joint = solve_joint(problem)
        except UncoverableError:
            continue
        best = None
        for plan in enumerate_plans(problem.cluster, problem.candidates, problem.boundaries, maximal=False):
            try:
                inst, _ = make_instance(plan, problem.profile, problem.boundaries, problem.counts)
                t = brute_force_minimax(inst).objective
            except Exception:
                continue
            best = t if best is None else min(best, t)
        assert joint.objective == best


def test_workers_do_not_change_result():
    problem = example_problem()
    a = plan_deployment(problem, prune=False)
    b = plan_deployment(problem, prune=False, workers=4)
    assert a.plan == b.plan and a.objective == b.objective


def test_replan_on_change():
    problem = example_problem()
    out, changed = replan_on_change(DeploymentPlan(problem.candidates, (4, 2, 0, 1)), problem)
    assert not changed
    out, changed = replan_on_change(DeploymentPlan(problem.candidates, (0, 0, 0, 2)), problem)
    assert changed and out.plan.replicas == (4, 2, 0, 1)


def test_oracle_cap():
    with pytest.raises(OracleCapExceeded, match="oracle cap exceeded"):
        solve_joint(example_problem(), cap=10)


def test_bound_is_proven_under_budget():
    problem = example_problem()
    exact = solve_joint(problem)
    cut = solve_joint(problem, node_limit=2)
    assert cut.objective >= exact.objective
    assert cut.bound <= exact.objective


def test_maximal_plans_lose_nothing_when_all_buckets_are_busy():
    rng = random.Random(7)
    checked = 0
    while checked < 10:
        problem = random_problem(rng)
        if not all(problem.counts):
            continue
        try:
            a = solve_joint(problem)
        except UncoverableError:
            continue
        assert solve_joint(problem, maximal=True).objective == a.objective
        checked += 1


def test_replan_after_long_buckets_empty():
    problem = example_problem()
    short = example_problem(counts=EXAMPLE_COUNTS[:3] + (0,))
    out, changed = replan_on_change(plan_deployment(problem).plan, short)
    assert changed
    assert out.plan.replicas[3] == 0


def test_replan_propagates_infeasibility():
    profile = example_profile()
    problem = PlanningProblem.from_counts(
        ClusterSpec(4), profile, profile.all_configs(), EXAMPLE_BOUNDARIES, EXAMPLE_COUNTS
    )
    with pytest.raises(UncoverableError):
        replan_on_change(DeploymentPlan(problem.candidates, (4, 0, 0, 0)), problem)
