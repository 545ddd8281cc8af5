"""Random instances and an itertools oracle shared by the scheduler tests."""

import itertools
import math
import random
from dataclasses import replace

from ssdc.devices import default_node
from ssdc.scheduler import TaskRequest, check_placement, placement_power
from ssdc.workload import Resources, default_catalog

KINDS = ("desktop", "laptop", "server", "smartphone", "single_board")


def random_nodes(rng: random.Random, n: int):
    out = []
    for i in range(n):
        spec = default_node(rng.choice(KINDS), f"n{i}")
        k = rng.uniform(0.3, 1.2)
        out.append(replace(spec, cpu_mips=round(spec.cpu_mips * k), mem=round(spec.mem * rng.uniform(0.3, 1.0))))
    return out


def random_tasks(rng: random.Random, n: int):
    """Replicas drawn from the default catalog at random non-zero levels."""
    catalog = default_catalog()
    out = []
    while len(out) < n:
        s = rng.choice(catalog)
        lvl = s.level(rng.randint(1, s.max_level))
        for r in range(rng.randint(1, s.replication)):
            if len(out) == n:
                break
            out.append(TaskRequest(
                id=f"{s.id}#{len(out)}", service_id=s.id, priority=s.priority,
                demand=lvl.demand, power_overhead=lvl.power_overhead,
                utility=lvl.utility / s.priority, requires_gpu=s.requires_gpu,
                smartphone_eligible=s.smartphone_eligible,
            ))
    return out


def random_instance(rng: random.Random, max_nodes=8, max_tasks=10):
    nodes = random_nodes(rng, rng.randint(1, max_nodes))
    tasks = random_tasks(rng, rng.randint(1, max_tasks))
    full = sum(n.peak_power for n in nodes) + sum(t.power_overhead for t in tasks)
    budget = rng.choice([math.inf, full * rng.uniform(0.05, 0.6)])
    return tasks, nodes, budget


def exhaustive(tasks, nodes, budget):
    """(utility, power, assignment) maximizing utility then minimizing power, by plain enumeration."""
    choices = [None] + [n.id for n in nodes]
    specs = {n.id: n for n in nodes}
    by_id = {t.id: t for t in tasks}
    best = (-1.0, math.inf, {})
    for combo in itertools.product(choices, repeat=len(tasks)):
        a = {t.id: c for t, c in zip(tasks, combo) if c is not None}
        if check_placement(tasks, nodes, a, budget):
            continue
        u = math.fsum(by_id[t].utility for t in a)
        p = placement_power(by_id, a, specs)
        if u > best[0] + 1e-9 or (abs(u - best[0]) <= 1e-9 and p < best[1] - 1e-9):
            best = (u, p, a)
    return best
