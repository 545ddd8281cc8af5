import math
import random
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from helpers import exhaustive, random_instance
from ssdc.actions import MigrateTask, PowerNodeOff, SetServiceLevel
from ssdc.devices import GpuSpec, default_node
from ssdc.errors import SizeError
from ssdc.scheduler import (
    TaskRequest,
    amorphous_mode,
    brute_force_place,
    check_placement,
    consolidate,
    degradation_ladder,
    efficiency_order,
    greedy_place,
    level_power,
    mesh_components,
    pareto_placements,
    requests_for,
)
from ssdc.workload import FeatureLevel, Resources, Service, ServiceKind


def task(tid, mips=1000.0, service=None, priority=1, gpu=0.0, utility=1.0, phone_ok=True):
    return TaskRequest(tid, service or tid, priority, Resources(mips, gpu, 100, 10), 0.0, utility,
                       gpu > 0, phone_ok)


def node(nid, mips, power, idle=None, **kw):
    base = default_node("laptop", nid)
    return replace(base, cpu_mips=mips, peak_power=power, idle_power=power / 2 if idle is None else idle, **kw)


# --- greedy -------------------------------------------------------------------------


def test_no_tasks():
    p = greedy_place([], [node("a", 1000, 10)])
    assert p.assignment == {} and p.unplaced == []


def test_most_efficient_node_first():
    fast, slow = node("b", 2000, 40), node("a", 1000, 40)  # 50 and 25 MI/J
    assert [n.id for n in efficiency_order([slow, fast])] == ["b", "a"]
    tasks = [task("t1", 500, "s1"), task("t2", 500, "s2")]
    budget = 40.0  # one node at full load
    p = greedy_place(tasks, [slow, fast], budget)
    assert p.assignment == {"t1": "b", "t2": "b"}


def test_gpu_task_without_gpu_nodes():
    sbc = default_node("single_board", "sbc")
    p = greedy_place([task("g", 100, gpu=500.0)], [sbc])
    assert p.unplaced == ["g"]


def test_phone_ineligible_task():
    ph = default_node("smartphone", "ph")
    p = greedy_place([task("f", 100, phone_ok=False)], [ph])
    assert p.unplaced == ["f"]


def test_replicas_spread_under_anti_affinity():
    nodes = [node("a", 10000, 40), node("b", 10000, 40)]
    ts = [task("s#0", 100, "s"), task("s#1", 100, "s")]
    p = greedy_place(ts, nodes)
    assert len(set(p.assignment.values())) == 2


def test_fixed_tasks_stay_put():
    nodes = [node("a", 2000, 40), node("b", 1000, 40)]
    fixed = [(task("old", 1500, "o"), "a")]
    p = greedy_place([task("new", 1000, "n")], nodes, fixed=fixed)
    assert p.assignment == {"old": "a", "new": "b"}


def test_greedy_is_deterministic():
    rng = random.Random(3)
    tasks, nodes, budget = random_instance(rng)
    a = greedy_place(tasks, nodes, budget)
    b = greedy_place(list(tasks), list(nodes), budget)
    assert a == b


def test_scaling_efficiency_keeps_the_ranking():
    rng = random.Random(8)
    for _ in range(20):
        tasks, nodes, _ = random_instance(rng)
        base = greedy_place(tasks, nodes)
        faster = [replace(n, cpu_mips=n.cpu_mips * 3, cpu_mflops=n.cpu_mflops * 3) for n in nodes]
        # efficiency triples everywhere, capacities grow: same order, at least as many placed
        assert [n.id for n in efficiency_order(faster)] == [n.id for n in efficiency_order(nodes)]
        assert greedy_place(tasks, faster).utility >= base.utility - 1e-9


# --- oracles ---------------------------------------------------------------------------


def test_oracle_single_task():
    p = brute_force_place([task("t")], [node("a", 2000, 20)])
    assert p.assignment == {"t": "a"} and p.utility == 1.0


def test_oracle_infeasible_instance():
    p = brute_force_place([task("t", 1e9)], [node("a", 2000, 20)])
    assert p.assignment == {} and p.utility == 0.0


def test_oracle_refuses_big_instances():
    with pytest.raises(SizeError):
        brute_force_place([task(f"t{i}") for i in range(11)], [node("a", 1, 1)])


def test_branch_and_bound_matches_plain_enumeration():
    rng = random.Random(21)
    for _ in range(40):
        tasks, nodes, budget = random_instance(rng, max_nodes=4, max_tasks=5)
        u, p, _ = exhaustive(tasks, nodes, budget)
        got = brute_force_place(tasks, nodes, budget)
        assert got.utility == pytest.approx(u, abs=1e-9)
        assert got.power == pytest.approx(p, abs=1e-6)
        assert check_placement(tasks, nodes, got.assignment, budget) == []


def test_pareto_front_contains_the_lexicographic_optimum():
    rng = random.Random(5)
    for _ in range(15):
        tasks, nodes, budget = random_instance(rng, max_nodes=3, max_tasks=4)
        front = pareto_placements(tasks, nodes, budget)
        best = brute_force_place(tasks, nodes, budget)
        assert front[0].utility == pytest.approx(best.utility)
        assert front[0].power == pytest.approx(best.power, abs=1e-6)
        for a, b in zip(front, front[1:]):
            assert a.utility > b.utility and a.power > b.power


def test_greedy_against_plain_enumeration():
    rng = random.Random(77)
    for _ in range(60):
        tasks, nodes, budget = random_instance(rng, max_nodes=4, max_tasks=5)
        u, _, _ = exhaustive(tasks, nodes, budget)
        g = greedy_place(tasks, nodes, budget)
        assert check_placement(tasks, nodes, g.assignment, budget) == []
        assert g.utility >= 0.8 * u - 1e-9


@given(st.integers(0, 10_000))
def test_greedy_never_breaks_a_constraint(seed):
    tasks, nodes, budget = random_instance(random.Random(seed))
    g = greedy_place(tasks, nodes, budget)
    assert check_placement(tasks, nodes, g.assignment, budget) == []
    assert set(g.assignment) | set(g.unplaced) == {t.id for t in tasks}


# --- degradation ladder -------------------------------------------------------------------


def svc(sid, priority, steps=(1000, 2000), min_level=0, replication=1):
    levels = [FeatureLevel(0)] + [FeatureLevel(i + 1, Resources(m, 0, 64, 1), 0.5, float(i + 1))
                                  for i, m in enumerate(steps)]
    return Service(sid, ServiceKind.WIKI, priority, tuple(levels), min_level=min_level, replication=replication)


def test_zero_deficit_no_actions():
    r = degradation_ladder([svc("a", 1)], {}, 0.0)
    assert r.actions == []


def test_lowest_priority_goes_first():
    mta = svc("mta", 1, min_level=1)
    ai = svc("ai", 5)
    step = level_power(ai, 2) - level_power(ai, 1)
    r = degradation_ladder([mta, ai], {}, step)
    assert r.actions == [SetServiceLevel("ai", 1)]
    assert r.levels == {"mta": 2, "ai": 1}


def test_deficit_beyond_sheddable_load():
    ss = [svc("a", 1, min_level=1), svc("b", 2), svc("c", 3, min_level=2)]
    sheddable = sum(level_power(s, s.max_level) - level_power(s, s.min_level) for s in ss)
    r = degradation_ladder(ss, {}, sheddable + 50.0)
    assert r.levels == {s.id: s.min_level for s in ss}
    assert r.savings == pytest.approx(sheddable)
    assert r.residual == pytest.approx(50.0)


def test_max_steps_caps_moves():
    r = degradation_ladder([svc("a", 1), svc("b", 2)], {}, math.inf, max_steps=1)
    assert r.actions == [SetServiceLevel("b", 1)]


@given(st.integers(0, 10_000), st.floats(0, 200), st.floats(0, 200))
def test_ladder_monotone_in_deficit(seed, x, y):
    rng = random.Random(seed)
    ss = [svc(f"s{i}", rng.randint(1, 5), tuple(sorted(rng.sample(range(100, 8000), 3))),
              min_level=rng.randint(0, 2)) for i in range(rng.randint(1, 6))]
    start = {s.id: rng.randint(s.min_level, s.max_level) for s in ss}
    d1, d2 = sorted((x, y))
    a = degradation_ladder(ss, start, d1).levels
    b = degradation_ladder(ss, start, d2).levels
    assert all(b[k] <= a[k] for k in a)


# --- consolidation ----------------------------------------------------------------------------


def test_consolidated_cluster_is_left_alone():
    a = node("a", 10000, 40)
    acts = consolidate({"t": "a"}, [a], [task("t", 1000)])
    assert acts == []


def test_two_half_loaded_nodes_merge():
    a, b = node("a", 10000, 40, idle=20), node("b", 10000, 40, idle=20)
    ts = [task("t1", 4000, "s1"), task("t2", 4000, "s2")]
    acts = consolidate({"t1": "a", "t2": "b"}, [a, b], ts)
    assert acts == [MigrateTask("t2", "b", "a"), PowerNodeOff("b")]


def test_gpu_task_is_not_moved_onto_gpu_less_node():
    sober = node("a", 10000, 20, idle=5)
    gpu_box = node("b", 10000, 80, idle=40, gpu=GpuSpec(10000, 512, 30))
    ts = [task("cpu", 1000, "c"), task("g", 1000, "g", gpu=500.0)]
    acts = consolidate({"cpu": "a", "g": "b"}, [sober, gpu_box], ts)
    assert not any(isinstance(x, MigrateTask) and x.task_id == "g" for x in acts)


# --- amorphous mode --------------------------------------------------------------------------


def peer_services():
    hpc = Service("hpc", ServiceKind.HPC_BATCH, 4,
                  (FeatureLevel(0), FeatureLevel(1, Resources(500, 0, 64, 1), 0.1, 1.0)),
                  replication=2, interruptible=True, peer_eligible=True)
    mta = svc("mta", 1, min_level=1)
    return [hpc, mta]


def test_only_peer_eligible_services_survive():
    nodes = [node(n, 10000, 20) for n in "abc"]
    r = amorphous_mode(peer_services(), {}, nodes, [("a", "b"), ("b", "c")])
    assert r.levels == {"hpc": 1, "mta": 0}
    assert set(r.placement.assignment) == {"hpc#0", "hpc#1"}


def test_partitioned_mesh_keeps_services_in_one_component():
    nodes = [node(n, 10000, 20) for n in "abcd"]
    edges = [("a", "b"), ("c", "d")]
    comps = mesh_components([n.id for n in nodes], edges)
    assert comps == [["a", "b"], ["c", "d"]]
    r = amorphous_mode(peer_services(), {}, nodes, edges)
    hosts = {r.placement.assignment[t] for t in ("hpc#0", "hpc#1")}
    assert any(hosts <= set(c) for c in comps)


def test_requests_weight_utility_by_priority(catalog):
    s = next(x for x in catalog if x.priority > 1)
    r = requests_for(s, s.max_level)
    assert len(r) == s.replication
    assert r[0].utility == pytest.approx(s.levels[-1].utility / s.priority)
