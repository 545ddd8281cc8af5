"""Task placement on heterogeneous salvaged nodes.

Production path: deterministic first-fit onto the most efficient nodes, the
priority-ordered degradation ladder, consolidation, and the restricted
peer-to-peer placement used when every switch is down. ``brute_force_place``
is the exhaustive oracle the heuristics are tested against.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import networkx as nx

from ssdc.actions import MigrateTask, PowerNodeOff, SetServiceLevel
from ssdc.devices import NodeKind, NodeSpec, efficiency, power_draw
from ssdc.errors import SizeError
from ssdc.workload import Resources, Service, ZERO

EPS = 1e-9
MAX_ORACLE_TASKS = 10
MAX_ORACLE_NODES = 8

# Reference fleet efficiency used to turn a level's demand into watts.
DEFAULT_MIPS_PER_WATT = 250.0
DEFAULT_MFLOPS_PER_WATT = 2500.0


@dataclass(frozen=True)
class TaskRequest:
    id: str
    service_id: str
    priority: int
    demand: Resources
    power_overhead: float = 0.0
    utility: float = 0.0
    requires_gpu: bool = False
    smartphone_eligible: bool = True


def requests_for(service: Service, level: int) -> list[TaskRequest]:
    """One request per replica of ``service`` running at ``level``.

    Placement utility is the level's utility divided by the service priority,
    so one unit of a priority-1 service outweighs the same unit elsewhere.
    """
    lv = service.level(level)
    util = lv.utility / service.priority
    return [
        TaskRequest(
            id=tid,
            service_id=service.id,
            priority=service.priority,
            demand=lv.demand,
            power_overhead=lv.power_overhead,
            utility=util,
            requires_gpu=service.requires_gpu,
            smartphone_eligible=service.smartphone_eligible,
        )
        for tid in service.task_ids()
    ]


@dataclass
class Placement:
    assignment: dict[str, str] = field(default_factory=dict)
    unplaced: list[str] = field(default_factory=list)
    power: float = 0.0
    utility: float = 0.0

    def on_node(self, node_id: str) -> list[str]:
        return sorted(t for t, n in self.assignment.items() if n == node_id)


def capacity(spec: NodeSpec) -> Resources:
    return Resources(spec.cpu_mips, spec.gpu.mflops if spec.gpu else 0.0, spec.mem, spec.bandwidth)


def eligible(task: TaskRequest, spec: NodeSpec) -> bool:
    if (task.requires_gpu or task.demand.gpu_mflops > 0) and spec.gpu is None:
        return False
    if spec.kind is NodeKind.SMARTPHONE and not task.smartphone_eligible:
        return False
    return True


def load_power(spec: NodeSpec, used: Resources, overhead: float) -> float:
    """Draw of an active node carrying ``used`` resources plus per-task overheads."""
    u_cpu = used.cpu_mips / spec.cpu_mips if spec.cpu_mips > 0 else 0.0
    u_gpu = used.gpu_mflops / spec.gpu.mflops if spec.gpu and spec.gpu.mflops > 0 else 0.0
    return power_draw(spec, min(1.0, max(u_cpu, u_gpu))) + overhead


def placement_power(tasks: dict[str, TaskRequest], assignment: dict[str, str], nodes: dict[str, NodeSpec]) -> float:
    used: dict[str, Resources] = {}
    over: dict[str, float] = {}
    for tid, nid in assignment.items():
        t = tasks[tid]
        used[nid] = used.get(nid, ZERO) + t.demand
        over[nid] = over.get(nid, 0.0) + t.power_overhead
    return math.fsum(load_power(nodes[n], used[n], over[n]) for n in sorted(used))


def check_placement(
    tasks: Sequence[TaskRequest],
    nodes: Sequence[NodeSpec],
    assignment: dict[str, str],
    energy_budget: float,
    anti_affinity: bool = True,
) -> list[str]:
    """Every constraint the assignment breaks; empty when feasible."""
    by_id = {t.id: t for t in tasks}
    specs = {n.id: n for n in nodes}
    problems = []
    used: dict[str, Resources] = {}
    seen: set[tuple[str, str]] = set()
    for tid, nid in assignment.items():
        if nid not in specs:
            problems.append(f"{tid}: unknown node {nid}")
            continue
        t = by_id[tid]
        if not eligible(t, specs[nid]):
            problems.append(f"{tid}: not eligible on {nid}")
        if anti_affinity and (t.service_id, nid) in seen:
            problems.append(f"{tid}: replica of {t.service_id} already on {nid}")
        seen.add((t.service_id, nid))
        used[nid] = used.get(nid, ZERO) + t.demand
    for nid, u in used.items():
        if not u.fits(capacity(specs[nid])):
            problems.append(f"{nid}: over capacity {u}")
    power = placement_power(by_id, {k: v for k, v in assignment.items() if k in by_id and v in specs}, specs)
    if power > energy_budget + EPS:
        problems.append(f"power {power:.3f} W over budget {energy_budget:.3f} W")
    return problems


def efficiency_order(nodes: Iterable[NodeSpec]) -> list[NodeSpec]:
    """Most MI/J first, ties by ascending id."""
    return sorted(nodes, key=lambda n: (-efficiency(n).mips_per_joule, n.id))


def sobriety_order(nodes: Iterable[NodeSpec]) -> list[NodeSpec]:
    """Most sober first: highest MI/J, then lowest idle power, then id."""
    return sorted(nodes, key=lambda n: (-efficiency(n).mips_per_joule, n.idle_power, n.id))


class _Bins:
    """Running per-node usage for the constructive heuristics."""

    def __init__(self, nodes: Sequence[NodeSpec]):
        self.specs = {n.id: n for n in nodes}
        self.used = {n.id: ZERO for n in nodes}
        self.over = {n.id: 0.0 for n in nodes}
        self.services: dict[str, Counter] = {n.id: Counter() for n in nodes}
        self.count = {n.id: 0 for n in nodes}
        self.power = 0.0

    def node_power(self, nid: str) -> float:
        if self.count[nid] == 0:
            return 0.0
        return load_power(self.specs[nid], self.used[nid], self.over[nid])

    def delta(self, t: TaskRequest, nid: str) -> float:
        spec = self.specs[nid]
        after = load_power(spec, self.used[nid] + t.demand, self.over[nid] + t.power_overhead)
        return after - self.node_power(nid)

    def fits(self, t: TaskRequest, nid: str, anti_affinity: bool) -> bool:
        spec = self.specs[nid]
        if not eligible(t, spec):
            return False
        if anti_affinity and t.service_id in self.services[nid]:
            return False
        return (self.used[nid] + t.demand).fits(capacity(spec))

    def add(self, t: TaskRequest, nid: str) -> None:
        d = self.delta(t, nid)
        self.used[nid] = self.used[nid] + t.demand
        self.over[nid] += t.power_overhead
        self.services[nid][t.service_id] += 1
        self.count[nid] += 1
        self.power += d

    def remove(self, t: TaskRequest, nid: str) -> None:
        before = self.node_power(nid)
        self.used[nid] = self.used[nid] - t.demand
        self.over[nid] -= t.power_overhead
        self.services[nid][t.service_id] -= 1
        if self.services[nid][t.service_id] <= 0:
            del self.services[nid][t.service_id]
        self.count[nid] -= 1
        if self.count[nid] == 0:
            self.used[nid] = ZERO
            self.over[nid] = 0.0
        self.power += self.node_power(nid) - before


def greedy_place(
    tasks: Sequence[TaskRequest],
    nodes: Sequence[NodeSpec],
    energy_budget: float = math.inf,
    fixed: Sequence[tuple[TaskRequest, str]] = (),
    anti_affinity: bool = True,
) -> Placement:
    """First-fit of tasks (priority asc, id asc) onto nodes (MI/J desc, id asc).

    ``fixed`` pins already-running tasks; they count toward capacity and the
    power budget but are never moved. When plain first-fit leaves tasks
    unplaced, a fixed portfolio of alternative orderings (size-decreasing,
    low-idle-first, best-fit) is tried and the best result by (utility, then
    power) is kept, followed by a one-move repair for each leftover task.
    Everything is deterministic.
    """
    order = efficiency_order(nodes)
    primary = _first_fit(tasks, order, _by_priority(tasks), energy_budget, fixed, anti_affinity)
    if not primary[0].unplaced:
        return primary[0]
    best = primary
    for attempt in _portfolio(tasks, order, energy_budget, fixed, anti_affinity):
        if _better(attempt[0], best[0]):
            best = attempt
    placement, bins = best
    _repair(placement, bins, {t.id: t for t in tasks}, order, energy_budget, anti_affinity)
    return placement


def _by_priority(tasks: Sequence[TaskRequest]) -> list[TaskRequest]:
    return sorted(tasks, key=lambda t: (t.priority, t.id))


def _better(a: Placement, b: Placement) -> bool:
    if a.utility > b.utility + EPS:
        return True
    return abs(a.utility - b.utility) <= EPS and a.power < b.power - EPS


def _start(order: Sequence[NodeSpec], fixed) -> tuple[Placement, _Bins]:
    bins = _Bins(order)
    placement = Placement()
    for t, nid in fixed:
        if nid in bins.specs:
            bins.add(t, nid)
            placement.assignment[t.id] = nid
            placement.utility += t.utility
    return placement, bins


def _first_fit(tasks, order, task_order, budget, fixed, anti_affinity, active_first=False):
    placement, bins = _start(order, fixed)
    for t in task_order:
        candidates = order
        if active_first:
            candidates = [n for n in order if bins.count[n.id]] + [n for n in order if not bins.count[n.id]]
        for n in candidates:
            if bins.fits(t, n.id, anti_affinity) and bins.power + bins.delta(t, n.id) <= budget + EPS:
                bins.add(t, n.id)
                placement.assignment[t.id] = n.id
                placement.utility += t.utility
                break
        else:
            placement.unplaced.append(t.id)
    placement.power = bins.power
    return placement, bins


def _best_fit(tasks, order, task_order, budget, fixed, anti_affinity):
    placement, bins = _start(order, fixed)
    for t in task_order:
        cands = [n for n in order if bins.fits(t, n.id, anti_affinity) and bins.power + bins.delta(t, n.id) <= budget + EPS]
        if not cands:
            placement.unplaced.append(t.id)
            continue
        n = min(cands, key=lambda n: (
            bins.count[n.id] == 0,
            (n.cpu_mips - bins.used[n.id].cpu_mips - t.demand.cpu_mips) / n.cpu_mips if n.cpu_mips else 0.0,
            n.id,
        ))
        bins.add(t, n.id)
        placement.assignment[t.id] = n.id
        placement.utility += t.utility
    placement.power = bins.power
    return placement, bins


def _portfolio(tasks, order, budget, fixed, anti_affinity):
    caps = [capacity(n) for n in order]
    top = Resources(*(max((c[i] for c in caps), default=0.0) for i in range(4)))

    def size(t: TaskRequest) -> float:
        return max((d / c for d, c in zip(t.demand, top) if c > 0), default=0.0)

    task_orders = [
        _by_priority(tasks),
        sorted(tasks, key=lambda t: (t.priority, -size(t), t.id)),
        sorted(tasks, key=lambda t: (-t.utility, t.id)),
        sorted(tasks, key=lambda t: (-t.utility / max(size(t), 1e-9), t.id)),
    ]
    node_orders = [
        order,
        sorted(order, key=lambda n: (n.idle_power, n.id)),
        sorted(order, key=lambda n: (-n.cpu_mips, n.id)),
    ]
    for no in node_orders:
        for to in task_orders:
            for active_first in (False, True):
                yield _first_fit(tasks, no, to, budget, fixed, anti_affinity, active_first)
    for to in (task_orders[0], task_orders[1], sorted(tasks, key=lambda t: (-size(t), t.id))):
        yield _best_fit(tasks, order, to, budget, fixed, anti_affinity)


def _repair(placement: Placement, bins: _Bins, by_id, order, budget, anti_affinity) -> None:
    """Try to seat each unplaced task by moving one placed task elsewhere."""
    pinned = set(placement.assignment) - set(by_id)
    for tid in sorted(placement.unplaced, key=lambda i: (by_id[i].priority, i)):
        t = by_id[tid]
        if _repair_one(t, placement, bins, by_id, order, budget, anti_affinity, pinned):
            placement.unplaced.remove(tid)
            placement.utility += t.utility
    placement.power = bins.power


def _repair_one(t, placement, bins, by_id, order, budget, anti_affinity, pinned) -> bool:
    for n in order:
        if not eligible(t, n):
            continue
        for uid in sorted(k for k, v in placement.assignment.items() if v == n.id and k not in pinned):
            u = by_id[uid]
            bins.remove(u, n.id)
            for m in order:
                if m.id == n.id or not bins.fits(u, m.id, anti_affinity):
                    continue
                bins.add(u, m.id)
                if bins.fits(t, n.id, anti_affinity):
                    bins.add(t, n.id)
                    if bins.power <= budget + EPS:
                        placement.assignment[uid] = m.id
                        placement.assignment[t.id] = n.id
                        return True
                    bins.remove(t, n.id)
                bins.remove(u, m.id)
            bins.add(u, n.id)
    return False


def brute_force_place(
    tasks: Sequence[TaskRequest],
    nodes: Sequence[NodeSpec],
    energy_budget: float = math.inf,
    anti_affinity: bool = True,
) -> Placement:
    """Exhaustive search for the placement maximizing utility, then minimizing power.

    Branch-and-bound over every task -> node-or-nothing choice. Intended as a
    test oracle; refuses instances beyond 10 tasks or 8 nodes.
    """
    if len(tasks) > MAX_ORACLE_TASKS or len(nodes) > MAX_ORACLE_NODES:
        raise SizeError(f"oracle limited to {MAX_ORACLE_TASKS} tasks and {MAX_ORACLE_NODES} nodes")
    ordered = sorted(tasks, key=lambda t: (-t.utility, t.id))
    suffix = [0.0] * (len(ordered) + 1)
    for i in range(len(ordered) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + ordered[i].utility
    specs = sorted(nodes, key=lambda n: n.id)
    bins = _Bins(specs)
    best = {"utility": -1.0, "power": math.inf, "assignment": {}}
    current: dict[str, str] = {}

    def signature(nid: str):
        s = bins.specs[nid]
        return (s.kind, s.cpu_mips, s.cpu_mflops, s.mem, s.bandwidth, s.idle_power, s.peak_power, s.gpu,
                bins.used[nid], bins.over[nid], frozenset(bins.services[nid].items()))

    def visit(i: int, utility: float) -> None:
        ub = utility + suffix[i]
        if ub < best["utility"] - EPS:
            return
        if ub <= best["utility"] + EPS and bins.power >= best["power"] - EPS:
            return
        if i == len(ordered):
            if utility > best["utility"] + EPS or (
                abs(utility - best["utility"]) <= EPS and bins.power < best["power"] - EPS
            ):
                best.update(utility=utility, power=bins.power, assignment=dict(current))
            return
        t = ordered[i]
        tried = set()
        for n in specs:
            if not bins.fits(t, n.id, anti_affinity):
                continue
            sig = signature(n.id)
            if sig in tried:
                continue
            tried.add(sig)
            if bins.power + bins.delta(t, n.id) > energy_budget + EPS:
                continue
            bins.add(t, n.id)
            current[t.id] = n.id
            visit(i + 1, utility + t.utility)
            del current[t.id]
            bins.remove(t, n.id)
        visit(i + 1, utility)

    visit(0, 0.0)
    assignment = best["assignment"]
    by_id = {t.id: t for t in tasks}
    return Placement(
        assignment=assignment,
        unplaced=sorted(t.id for t in tasks if t.id not in assignment),
        power=placement_power(by_id, assignment, {n.id: n for n in nodes}),
        utility=math.fsum(by_id[t].utility for t in assignment),
    )


def pareto_placements(
    tasks: Sequence[TaskRequest],
    nodes: Sequence[NodeSpec],
    energy_budget: float = math.inf,
    anti_affinity: bool = True,
) -> list[Placement]:
    """All (utility, power)-nondominated placements, by full enumeration (tiny instances only)."""
    if len(tasks) > 6 or len(nodes) > 4:
        raise SizeError("full Pareto enumeration limited to 6 tasks and 4 nodes")
    specs = sorted(nodes, key=lambda n: n.id)
    bins = _Bins(specs)
    found: dict[tuple[float, float], dict[str, str]] = {}
    current: dict[str, str] = {}
    ordered = sorted(tasks, key=lambda t: t.id)

    def visit(i: int, utility: float) -> None:
        if i == len(ordered):
            key = (round(utility, 9), round(bins.power, 9))
            found.setdefault(key, dict(current))
            return
        t = ordered[i]
        for n in specs:
            if bins.fits(t, n.id, anti_affinity) and bins.power + bins.delta(t, n.id) <= energy_budget + EPS:
                bins.add(t, n.id)
                current[t.id] = n.id
                visit(i + 1, utility + t.utility)
                del current[t.id]
                bins.remove(t, n.id)
        visit(i + 1, utility)

    visit(0, 0.0)
    front = []
    for (u, p), a in found.items():
        dominated = any((u2 >= u and p2 <= p) and (u2 > u or p2 < p) for (u2, p2) in found)
        if not dominated:
            front.append(Placement(a, sorted(t.id for t in tasks if t.id not in a), p, u))
    return sorted(front, key=lambda pl: (-pl.utility, pl.power))


# --- degradation ------------------------------------------------------------------


@dataclass
class LadderResult:
    actions: list[SetServiceLevel]
    levels: dict[str, int]
    savings: float
    residual: float


def level_power(
    service: Service,
    level: int,
    mips_per_watt: float = DEFAULT_MIPS_PER_WATT,
    mflops_per_watt: float = DEFAULT_MFLOPS_PER_WATT,
) -> float:
    """Projected W for all replicas of ``service`` at ``level`` on a reference node."""
    lv = service.level(level)
    w = lv.power_overhead + lv.demand.cpu_mips / mips_per_watt + lv.demand.gpu_mflops / mflops_per_watt
    return service.replication * w


def degradation_ladder(
    services: Sequence[Service],
    levels: dict[str, int],
    deficit: float,
    power_of: Callable[[Service, int], float] = level_power,
    max_steps: int | None = None,
) -> LadderResult:
    """Lower services one level at a time until ``deficit`` W is saved.

    ``max_steps`` caps the number of single-level moves.

    The next service to step down is the lowest-priority one still above its
    ``min_level``; ties go to lower utility-per-watt at the current level, then
    to the smaller id. Nobody goes below ``min_level``.
    """
    current = {s.id: levels.get(s.id, s.max_level) for s in services}
    actions: list[SetServiceLevel] = []
    saved = 0.0
    if deficit <= 0:
        return LadderResult(actions, current, 0.0, 0.0)

    def upw(s: Service) -> float:
        p = power_of(s, current[s.id])
        return s.level(current[s.id]).utility / p if p > 0 else math.inf

    while saved < deficit - EPS and (max_steps is None or len(actions) < max_steps):
        candidates = [s for s in services if current[s.id] > s.min_level]
        if not candidates:
            break
        s = min(candidates, key=lambda s: (-s.priority, upw(s), s.id))
        k = current[s.id]
        saved += power_of(s, k) - power_of(s, k - 1)
        current[s.id] = k - 1
        actions.append(SetServiceLevel(s.id, k - 1))
    return LadderResult(actions, current, saved, max(0.0, deficit - saved))


# --- consolidation ----------------------------------------------------------------


def consolidate(
    placement: dict[str, str],
    nodes: Sequence[NodeSpec],
    tasks: Sequence[TaskRequest],
    anti_affinity: bool = True,
    energy_budget: float = math.inf,
) -> list[MigrateTask | PowerNodeOff]:
    """Empty the least sober nodes onto more sober ones when that strictly cuts power.

    ``nodes`` are the powered-on nodes. Emptied (or already idle) nodes get a
    PowerNodeOff. Service levels never change.
    """
    by_id = {t.id: t for t in tasks}
    specs = sobriety_order(nodes)
    rank = {n.id: i for i, n in enumerate(specs)}
    bins = _Bins(specs)
    where = {tid: nid for tid, nid in placement.items() if nid in rank and tid in by_id}
    for tid in sorted(where):
        bins.add(by_id[tid], where[tid])
    actions: list[MigrateTask | PowerNodeOff] = []
    off: set[str] = set()

    improved = True
    while improved:
        improved = False
        donors = [n for n in reversed(specs) if bins.count[n.id] > 0 and n.id not in off]
        for donor in donors:
            moving = sorted((t for t, n in where.items() if n == donor.id), key=lambda t: (by_id[t].priority, t))
            before = bins.power
            trial: list[tuple[str, str]] = []
            for tid in moving:
                bins.remove(by_id[tid], donor.id)
            ok = True
            for tid in moving:
                t = by_id[tid]
                for n in specs:
                    if n.id == donor.id or n.id in off or bins.count[n.id] == 0:
                        continue
                    if bins.fits(t, n.id, anti_affinity):
                        bins.add(t, n.id)
                        trial.append((tid, n.id))
                        break
                else:
                    ok = False
                    break
            if ok and bins.power < before - EPS and bins.power <= energy_budget + EPS:
                for tid, nid in trial:
                    actions.append(MigrateTask(tid, donor.id, nid))
                    where[tid] = nid
                actions.append(PowerNodeOff(donor.id))
                off.add(donor.id)
                improved = True
                break
            for tid, nid in reversed(trial):
                bins.remove(by_id[tid], nid)
            for tid in moving:
                bins.add(by_id[tid], donor.id)
    for n in specs:
        if bins.count[n.id] == 0 and n.id not in off:
            actions.append(PowerNodeOff(n.id))
    return actions


# --- amorphous mode ---------------------------------------------------------------


@dataclass
class RestrictedPlacement:
    levels: dict[str, int]
    placement: Placement
    components: list[list[str]]


def mesh_components(node_ids: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[list[str]]:
    """Connected components of the peer-to-peer mesh, largest first, then by smallest id."""
    g = nx.Graph()
    ids = set(node_ids)
    g.add_nodes_from(ids)
    g.add_edges_from((a, b) for a, b in edges if a in ids and b in ids)
    comps = [sorted(c) for c in nx.connected_components(g)]
    return sorted(comps, key=lambda c: (-len(c), c[0]))


def amorphous_mode(
    services: Sequence[Service],
    levels: dict[str, int],
    nodes: Sequence[NodeSpec],
    edges: Iterable[tuple[str, str]],
    energy_budget: float = math.inf,
) -> RestrictedPlacement:
    """Peer-to-peer-only operation: stop every service that is not peer-eligible,
    and keep each surviving service inside a single mesh component.
    """
    specs = {n.id: n for n in nodes}
    comps = mesh_components(specs, edges)
    new_levels = {s.id: (levels.get(s.id, s.max_level) if s.peer_eligible else 0) for s in services}
    placement = Placement()
    fixed: list[tuple[TaskRequest, str]] = []
    for s in sorted(services, key=lambda s: (s.priority, s.id)):
        if new_levels[s.id] == 0:
            continue
        reqs = requests_for(s, new_levels[s.id])
        for comp in comps:
            members = [specs[i] for i in comp]
            comp_fixed = [(t, n) for t, n in fixed if n in comp]
            trial = greedy_place(reqs, members, energy_budget - _fixed_power(fixed, specs, exclude=comp),
                                 fixed=comp_fixed)
            if not trial.unplaced:
                for t in reqs:
                    fixed.append((t, trial.assignment[t.id]))
                break
        else:
            placement.unplaced.extend(t.id for t in reqs)
    for t, n in fixed:
        placement.assignment[t.id] = n
        placement.utility += t.utility
    placement.power = placement_power({t.id: t for t, _ in fixed}, placement.assignment, specs)
    return RestrictedPlacement(new_levels, placement, comps)


def _fixed_power(fixed, specs, exclude) -> float:
    outside = {t.id: n for t, n in fixed if n not in exclude}
    return placement_power({t.id: t for t, _ in fixed}, outside, specs)
