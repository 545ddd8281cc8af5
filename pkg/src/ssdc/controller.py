"""Autonomic control loop: monitor -> analyze -> plan -> execute over shared knowledge.

``monitor``, ``watchdog``, ``analyze``, ``plan`` and ``viability_check`` are pure
functions of their inputs. ``execute`` is the only one that touches the world,
and it does so atomically or not at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from ssdc.actions import (
    ACTION_KIND, ChargeStorage, EnterAmorphousMode, ExitAmorphousMode, MigrateTask,
    PowerNodeOff, PowerNodeOn, SetServiceLevel, StartTask, StopTask, subject,
)
from ssdc.devices import NodeSpec, Status
from ssdc.energy import SupplyBreakdown, forecast_pv
from ssdc.errors import HistoryError, StalePlanError
from ssdc.scheduler import (
    EPS, TaskRequest, amorphous_mode, consolidate, degradation_ladder, greedy_place,
    placement_power, requests_for,
)
from ssdc.workload import QuotaPolicy, QuotaResource, Service, Verdict, enforce_quota
from ssdc.world import World

DEFAULT_HORIZON = 60
DEFAULT_K_MAX = 5


# --- perturbations ----------------------------------------------------------------


class PerturbationKind(str, Enum):
    # Declaration order is the order analyze() reports kinds in.
    NODE_FAILURE = "NodeFailure"
    NODE_LEAVE = "NodeLeave"
    THERMAL_TRIP = "ThermalTrip"
    SWITCH_FAILURE = "SwitchFailure"
    SWITCH_RECOVERY = "SwitchRecovery"
    NODE_JOIN = "NodeJoin"
    ENERGY_SHORTFALL = "EnergyShortfall"
    ENERGY_SURPLUS = "EnergySurplus"


KIND_RANK = {k: i for i, k in enumerate(PerturbationKind)}

# Internal constraints come from the cluster's own elements, external ones from
# its environment (energy supply, network fabric).
INTERNAL_KINDS = frozenset({
    PerturbationKind.NODE_FAILURE, PerturbationKind.NODE_LEAVE,
    PerturbationKind.THERMAL_TRIP, PerturbationKind.NODE_JOIN,
})
EXTERNAL_KINDS = frozenset(PerturbationKind) - INTERNAL_KINDS


@dataclass(frozen=True)
class Perturbation:
    kind: PerturbationKind
    subject: str
    magnitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))

    @property
    def tag(self) -> str:
        return f"{self.kind.value}:{self.subject}"

    @property
    def internal(self) -> bool:
        return self.kind in INTERNAL_KINDS


def sort_perturbations(perts: Iterable[Perturbation]) -> list[Perturbation]:
    """Deduplicate on (kind, subject), keeping the largest magnitude; order by kind then subject."""
    best: dict[tuple, Perturbation] = {}
    for p in perts:
        key = (p.kind, p.subject)
        if key not in best or p.magnitude > best[key].magnitude:
            best[key] = p
    return sorted(best.values(), key=lambda p: (KIND_RANK[p.kind], p.subject))


# --- snapshot ---------------------------------------------------------------------


@dataclass(frozen=True)
class NodeView:
    spec: NodeSpec
    status: Status
    temperature: float
    battery_soc: float | None
    utilization: float
    reachable: bool
    last_heartbeat: int | None
    present: bool


@dataclass(frozen=True)
class TaskView:
    id: str
    service_id: str
    level: int
    node: str | None
    last_node: str | None


@dataclass(frozen=True)
class EnergyView:
    breakdown: SupplyBreakdown  # W available per source right now
    demand: float  # W drawn by the current placement
    unmet: float  # Wh left unserved in the previous step
    storage_energy: float  # Wh extractable, reserves respected
    storage_rate: float  # W storage could deliver right now
    pv_forecast: tuple[float, ...]  # W for the next horizon steps
    grid_charging: bool


@dataclass(frozen=True)
class SystemSnapshot:
    step: int
    time: float
    dt: float
    version: int
    nodes: Mapping[str, NodeView]
    tasks: Mapping[str, TaskView]
    services: Mapping[str, Service]
    levels: Mapping[str, int]
    served: Mapping[str, int]
    energy: EnergyView
    switches: Mapping[str, bool]
    amorphous: bool
    mesh: tuple[tuple[str, str], ...]
    quota_factors: Mapping[str, float] = field(default_factory=dict)

    def up_nodes(self) -> list[str]:
        return sorted(n for n, v in self.nodes.items() if v.status is Status.UP)


def monitor(
    world: World,
    horizon: int = DEFAULT_HORIZON,
    policies: Sequence[QuotaPolicy] = (),
) -> SystemSnapshot:
    """Read every sensor into an immutable snapshot; the world is not modified."""
    nodes = {}
    for nid in sorted(world.specs):
        st = world.states[nid]
        nodes[nid] = NodeView(
            spec=world.specs[nid],
            status=st.status,
            temperature=st.temperature,
            battery_soc=st.battery_soc,
            utilization=st.utilization,
            reachable=world.topology.reachable(nid),
            last_heartbeat=world.heartbeats.get(nid),
            present=nid in world.present,
        )
    tasks = {
        tid: TaskView(tid, t.service_id, t.level, t.node, world.last_node.get(tid))
        for tid, t in sorted(world.tasks.items())
    }
    es = world.energy
    t = world.time
    breakdown = es.available(t, world.dt)
    return SystemSnapshot(
        step=world.step,
        time=t,
        dt=world.dt,
        version=world.version,
        nodes=nodes,
        tasks=tasks,
        services=dict(world.services),
        levels=dict(world.levels),
        served=world.served_levels(),
        energy=EnergyView(
            breakdown=breakdown,
            demand=world.demand(),
            unmet=world.last_unmet,
            storage_energy=es.storage_energy(),
            storage_rate=breakdown.ups + breakdown.phones,
            pv_forecast=tuple(_pv_outlook(world, horizon)),
            grid_charging=es.allow_grid_charging,
        ),
        switches=dict(world.topology.switches),
        amorphous=world.amorphous,
        mesh=world.topology.mesh,
        quota_factors=quota_factors(policies, world),
    )


def _pv_outlook(world: World, horizon: int) -> list[float]:
    """Persistence forecast; before a full day is on record, today's reading is held flat."""
    trace = world.energy.pv
    if trace is None:
        return [0.0] * horizon
    now = trace.index(world.time)
    try:
        return forecast_pv(trace, now, horizon)
    except HistoryError:
        return [trace.watts[now]] * horizon


def quota_factors(policies: Sequence[QuotaPolicy], world: World) -> dict[str, float]:
    """Most restrictive decision factor per resource at the current time."""
    out: dict[str, float] = {}
    for pol in policies:
        hist = world.usage.get(pol.resource.value, [])
        request = hist[-1][1] if hist else 0.0
        supply = demand = None
        if pol.mode.value == "supply":
            b = world.energy.available(world.time, world.dt)
            supply, demand = b.total, world.demand()
        dec = enforce_quota(pol, hist, world.time, request, supply, demand)
        f = 1.0 if dec.verdict is Verdict.ALLOW else dec.factor
        key = pol.resource.value
        out[key] = min(out.get(key, 1.0), f)
    return out


# --- energy arithmetic on a snapshot ------------------------------------------------


def _supplies(ev: EnergyView, factor: float = 1.0) -> list[float]:
    grid = ev.breakdown.grid
    now = ev.breakdown.pv + grid
    ahead = [f + grid for f in ev.pv_forecast[:-1]] if ev.pv_forecast else []
    return [factor * s for s in [now] + ahead]


def sustainable_power(ev: EnergyView, dt: float, factor: float = 1.0) -> float:
    """Largest constant draw (W) the horizon can carry without running storage dry.

    Storage tops up every step where supply falls short of the draw, and may never
    be asked for more than its current rate.
    """
    s = sorted(_supplies(ev, factor))
    h = dt / 3600.0
    energy = factor * ev.storage_energy
    cap = s[0] + factor * ev.storage_rate
    # g(P) = h * sum(max(0, P - s_k)) is piecewise linear; walk the breakpoints.
    acc = 0.0
    for j, sj in enumerate(s):
        nxt = s[j + 1] if j + 1 < len(s) else math.inf
        acc += sj
        n = j + 1
        p = (energy / h + acc) / n
        if p <= nxt:
            return max(0.0, min(p, cap))
    return max(0.0, cap)


def shortfall_wh(ev: EnergyView, demand: float, dt: float, factor: float = 1.0) -> float:
    """Energy (Wh) the horizon cannot deliver at a constant ``demand`` W."""
    h = dt / 3600.0
    rate = factor * ev.storage_rate
    from_storage = 0.0
    rate_excess = 0.0
    for s in _supplies(ev, factor):
        gap = max(0.0, demand - s)
        from_storage += min(rate, gap) * h
        rate_excess += max(0.0, gap - rate) * h
    return max(0.0, from_storage - factor * ev.storage_energy) + rate_excess


# --- viability ----------------------------------------------------------------------


@dataclass(frozen=True)
class ViabilityDomain:
    p_crit: int = 1
    unmet_tolerance: float = 0.0


@dataclass(frozen=True)
class InDomain:
    @property
    def ok(self) -> bool:
        return True


@dataclass(frozen=True)
class Breach:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return False


def viability_check(snapshot: SystemSnapshot, domain: ViabilityDomain = ViabilityDomain()) -> InDomain | Breach:
    nodes = ((nid, nv.spec, nv.status, nv.temperature) for nid, nv in snapshot.nodes.items())
    return _verdict(snapshot.services, snapshot.served, snapshot.energy.unmet, nodes, domain)


def world_viability(world: World, domain: ViabilityDomain = ViabilityDomain()) -> InDomain | Breach:
    """Same verdict as ``viability_check(monitor(world))``, without building the snapshot."""
    nodes = ((nid, world.specs[nid], world.states[nid].status, world.states[nid].temperature)
             for nid in sorted(world.specs))
    return _verdict(world.services, world.served_levels(), world.last_unmet, nodes, domain)


def _verdict(services, served, unmet, nodes, domain) -> InDomain | Breach:
    bad = []
    for sid in sorted(services):
        svc = services[sid]
        lvl = served.get(sid, 0)
        if svc.priority <= domain.p_crit and lvl < svc.min_level:
            bad.append(f"service {sid} served at level {lvl} < min_level {svc.min_level}")
    if unmet > domain.unmet_tolerance:
        bad.append(f"unmet energy {unmet:.6g} Wh")
    for nid, spec, status, temp in nodes:
        if status is Status.UP and temp > spec.thermal_threshold:
            bad.append(f"node {nid} at {temp:.2f} C above threshold")
    return Breach(tuple(bad)) if bad else InDomain()


# --- loop phase ---------------------------------------------------------------------


class LoopPhase(str, Enum):
    NOMINAL = "Nominal"
    PERTURBED = "Perturbed"
    TRANSIENT = "Transient"
    NEW_EQUILIBRIUM = "NewEquilibrium"


ALLOWED_EDGES = frozenset({
    (LoopPhase.NOMINAL, LoopPhase.NOMINAL),
    (LoopPhase.NOMINAL, LoopPhase.PERTURBED),
    (LoopPhase.PERTURBED, LoopPhase.TRANSIENT),
    (LoopPhase.TRANSIENT, LoopPhase.TRANSIENT),
    (LoopPhase.TRANSIENT, LoopPhase.NEW_EQUILIBRIUM),
    (LoopPhase.NEW_EQUILIBRIUM, LoopPhase.NOMINAL),
})


def next_phase(phase: LoopPhase, disturbed: bool, settled: bool) -> LoopPhase:
    """``disturbed``: perturbations seen or state outside the domain this cycle.
    ``settled``: state in the domain, nothing perceived, nothing planned."""
    if phase is LoopPhase.NOMINAL:
        return LoopPhase.PERTURBED if disturbed else LoopPhase.NOMINAL
    if phase is LoopPhase.PERTURBED:
        return LoopPhase.TRANSIENT
    if phase is LoopPhase.TRANSIENT:
        return LoopPhase.NEW_EQUILIBRIUM if settled else LoopPhase.TRANSIENT
    return LoopPhase.NOMINAL


# --- knowledge ----------------------------------------------------------------------


@dataclass
class Knowledge:
    services: dict[str, Service]
    nominal_levels: dict[str, int]
    p_crit: int = 1
    k_max: int = DEFAULT_K_MAX
    heartbeat_timeout: int = 1
    horizon: int = DEFAULT_HORIZON
    consolidation_period: int = 60
    raise_margin: float = 0.1
    grid_charging_allowed: bool = True
    anti_affinity: bool = True
    members: set[str] = field(default_factory=set)
    declared_failed: set[str] = field(default_factory=set)
    switch_view: dict[str, bool] = field(default_factory=dict)
    saved_levels: dict[str, int] | None = None
    last_consolidation: int = 0
    # (inputs) -> smallest budget at which some level can be raised
    _raise_memo: dict = field(default_factory=dict, repr=False)

    def acknowledge(self, perts: Sequence[Perturbation], plan: "ActionPlan", snapshot: SystemSnapshot) -> None:
        for p in perts:
            if p.kind is PerturbationKind.NODE_FAILURE:
                self.members.discard(p.subject)
                self.declared_failed.add(p.subject)
            elif p.kind in (PerturbationKind.NODE_LEAVE, PerturbationKind.THERMAL_TRIP):
                self.members.discard(p.subject)
                if p.kind is PerturbationKind.NODE_LEAVE:
                    self.declared_failed.discard(p.subject)
            elif p.kind is PerturbationKind.NODE_JOIN:
                self.members.add(p.subject)
                self.declared_failed.discard(p.subject)
            elif p.kind is PerturbationKind.SWITCH_FAILURE:
                self.switch_view[p.subject] = False
            elif p.kind is PerturbationKind.SWITCH_RECOVERY:
                self.switch_view[p.subject] = True
        for a in plan.actions:
            if isinstance(a, EnterAmorphousMode):
                self.saved_levels = dict(snapshot.levels)
            elif isinstance(a, ExitAmorphousMode):
                self.saved_levels = None
        if plan.self_optimization or perts:
            self.last_consolidation = snapshot.step


# --- analyze ------------------------------------------------------------------------


def watchdog(
    snapshot: SystemSnapshot,
    heartbeat_timeout: int,
    watched: Iterable[str] | None = None,
) -> list[Perturbation]:
    """NodeFailure for each watched node whose last heartbeat is older than the timeout.

    Only nodes expected to beat (up, or failed without notice) are considered.
    Callers pass ``watched`` = nodes not yet declared, so each failure is reported once.
    """
    if heartbeat_timeout < 1:
        raise ValueError("heartbeat_timeout must be >= 1")
    ids = sorted(snapshot.nodes) if watched is None else sorted(watched)
    out = []
    for nid in ids:
        nv = snapshot.nodes.get(nid)
        if nv is None or nv.status not in (Status.UP, Status.FAILED):
            continue
        last = nv.last_heartbeat if nv.last_heartbeat is not None else -math.inf
        if snapshot.step - last > heartbeat_timeout:
            out.append(Perturbation(PerturbationKind.NODE_FAILURE, nid, float(snapshot.step - last)))
    return out


def analyze(snapshot: SystemSnapshot, knowledge: Knowledge) -> list[Perturbation]:
    perts: list[Perturbation] = []
    gone: set[str] = set()
    for nid in sorted(knowledge.members):
        nv = snapshot.nodes.get(nid)
        if nv is None or nv.status is Status.RETIRED or not nv.present:
            perts.append(Perturbation(PerturbationKind.NODE_LEAVE, nid))
            gone.add(nid)
        elif nv.status is Status.THERMAL:
            perts.append(Perturbation(PerturbationKind.THERMAL_TRIP, nid, nv.temperature))
            gone.add(nid)
    watched = knowledge.members - knowledge.declared_failed - gone
    perts.extend(watchdog(snapshot, knowledge.heartbeat_timeout, watched))
    for nid, nv in snapshot.nodes.items():
        if nv.present and nv.status is Status.UP and nid not in knowledge.members:
            perts.append(Perturbation(PerturbationKind.NODE_JOIN, nid))
    for sw, up in snapshot.switches.items():
        known = knowledge.switch_view.get(sw, True)
        if known and not up:
            perts.append(Perturbation(PerturbationKind.SWITCH_FAILURE, sw))
        elif up and not known:
            perts.append(Perturbation(PerturbationKind.SWITCH_RECOVERY, sw))

    ev = snapshot.energy
    factor = snapshot.quota_factors.get(QuotaResource.ENERGY.value, 1.0)
    deficit = max(shortfall_wh(ev, ev.demand, snapshot.dt, factor), ev.unmet)
    if deficit > EPS:
        perts.append(Perturbation(PerturbationKind.ENERGY_SHORTFALL, "cluster", deficit))
    elif not snapshot.amorphous and not perts:
        budget = sustainable_power(ev, snapshot.dt, factor)
        if _can_improve(snapshot, knowledge, budget):
            perts.append(Perturbation(PerturbationKind.ENERGY_SURPLUS, "cluster", budget - ev.demand))
    return sort_perturbations(perts)


# --- plan ---------------------------------------------------------------------------


@dataclass
class ActionPlan:
    actions: list = field(default_factory=list)
    based_on: int = 0
    infeasible: bool = False
    reasons: tuple[str, ...] = ()
    self_optimization: bool = False

    def __bool__(self) -> bool:
        return bool(self.actions)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Target:
    levels: dict[str, int]
    assignment: dict[str, str]
    unplaced: list[str]
    power: float


class _Planner:
    """Placement arithmetic shared by analyze (what-if) and plan."""

    def __init__(self, snapshot: SystemSnapshot, knowledge: Knowledge, lost: Iterable[str] = (), joining: Iterable[str] = ()):
        self.snap = snapshot
        self.k = knowledge
        self.services = [snapshot.services[s] for s in sorted(snapshot.services)]
        excluded = (set(knowledge.declared_failed) - set(joining)) | set(lost)
        qf = snapshot.quota_factors
        self.cands: dict[str, NodeSpec] = {}
        for nid, nv in snapshot.nodes.items():
            if nid in excluded or not nv.present or nv.status not in (Status.UP, Status.ENERGY_SHED):
                continue
            if not (snapshot.amorphous or nv.reachable or not any(snapshot.switches.values())):
                continue
            self.cands[nid] = _quota_view(nv.spec, qf)

    def requests(self, levels: Mapping[str, int]) -> dict[str, TaskRequest]:
        out = {}
        for s in self.services:
            lvl = levels.get(s.id, 0)
            if lvl > 0:
                for r in requests_for(s, lvl):
                    out[r.id] = r
        return out

    def evaluate(self, levels: Mapping[str, int], budget: float = math.inf) -> Target:
        reqs = self.requests(levels)
        fixed, free = [], []
        for tid in sorted(reqs):
            r = reqs[tid]
            cur = self.snap.tasks.get(tid)
            if (
                cur is not None and cur.node in self.cands
                and cur.level == levels.get(r.service_id)
                and self.snap.nodes[cur.node].status is Status.UP
            ):
                fixed.append((r, cur.node))
            else:
                free.append(r)
        nodes = [self.cands[n] for n in sorted(self.cands)]
        if fixed and placement_power({r.id: r for r, _ in fixed}, {r.id: n for r, n in fixed}, self.cands) > budget:
            free = [r for r, _ in fixed] + free
            fixed = []
        pl = greedy_place(free, nodes, budget, fixed, self.k.anti_affinity)
        assignment = dict(pl.assignment)
        active = [self.cands[n] for n in sorted(set(assignment.values()))]
        placed = [reqs[t] for t in sorted(assignment)]
        for a in consolidate(assignment, active, placed, self.k.anti_affinity, budget):
            if isinstance(a, MigrateTask):
                assignment[a.task_id] = a.target
        power = placement_power(reqs, assignment, self.cands)
        return Target(dict(levels), assignment, sorted(pl.unplaced), power)

    def fit(self, levels: Mapping[str, int], budget: float) -> tuple[Target, list[SetServiceLevel]]:
        """Walk down the degradation ladder one level at a time until the target fits."""
        levels = dict(levels)
        ladder: list[SetServiceLevel] = []
        target = self.evaluate(levels)
        while target.unplaced or target.power > budget + EPS:
            res = degradation_ladder(self.services, levels, math.inf, max_steps=1)
            if not res.actions:
                break
            ladder.extend(res.actions)
            levels = res.levels
            target = self.evaluate(levels)
        if target.unplaced or target.power > budget + EPS:
            target = self.evaluate(levels, budget)
            return target, ladder
        # The ladder may overshoot; hand back what still fits, most important first.
        return self._restore(target, ladder, budget), ladder

    def _restore(self, target: Target, ladder: list[SetServiceLevel], budget: float) -> Target:
        ceiling: dict[str, int] = {}
        for a in ladder:
            ceiling[a.service_id] = max(ceiling.get(a.service_id, 0), a.level + 1)
        levels = dict(target.levels)
        for s in sorted((self.snap.services[i] for i in ceiling), key=lambda s: (s.priority, s.id)):
            while levels[s.id] < ceiling[s.id]:
                trial = dict(levels)
                trial[s.id] += 1
                t = self.evaluate(trial)
                if t.unplaced or t.power > budget + EPS:
                    break
                levels, target = trial, t
        return target

    def raise_levels(self, base: Target, budget: float) -> Target:
        ceiling = (1.0 - self.k.raise_margin) * budget
        levels = dict(base.levels)
        target = base
        for s in sorted(self.services, key=lambda s: (s.priority, s.id)):
            while levels.get(s.id, 0) < self.k.nominal_levels.get(s.id, s.max_level):
                trial = dict(levels)
                trial[s.id] = levels.get(s.id, 0) + 1
                t = self.evaluate(trial)
                if t.unplaced or t.power > ceiling + EPS:
                    break
                levels, target = trial, t
        return target

    def raise_threshold(self) -> float:
        """Smallest budget at which ``raise_levels`` would lift at least one level."""
        ceiling_scale = 1.0 - self.k.raise_margin
        need = math.inf
        for s in self.services:
            lvl = self.snap.levels.get(s.id, 0)
            if lvl >= self.k.nominal_levels.get(s.id, s.max_level):
                continue
            trial = dict(self.snap.levels)
            trial[s.id] = lvl + 1
            t = self.evaluate(trial)
            if not t.unplaced and ceiling_scale > 0:
                need = min(need, t.power / ceiling_scale)
        return need


def _qualified_orphans(snapshot: SystemSnapshot) -> list[str]:
    """Unplaced tasks whose previous host is still alive (so no detector will fire)."""
    out = []
    for tid, tv in snapshot.tasks.items():
        if tv.node is not None or tv.level == 0:
            continue
        host = snapshot.nodes.get(tv.last_node) if tv.last_node else None
        if host is None or host.status in (Status.UP, Status.ENERGY_SHED):
            out.append(tid)
    return sorted(out)


def _quota_view(spec: NodeSpec, factors: Mapping[str, float]) -> NodeSpec:
    comp = factors.get(QuotaResource.COMPUTATION.value, 1.0)
    mem = factors.get(QuotaResource.MEMORY.value, 1.0)
    bw = factors.get(QuotaResource.COMMUNICATION.value, 1.0)
    if comp == mem == bw == 1.0:
        return spec
    # Scaling the dynamic power range with the compute rates keeps watts per
    # absolute unit of work unchanged.
    gpu = replace(spec.gpu, mflops=spec.gpu.mflops * comp) if spec.gpu else None
    return replace(
        spec,
        cpu_mips=spec.cpu_mips * comp,
        cpu_mflops=spec.cpu_mflops * comp,
        peak_power=spec.idle_power + (spec.peak_power - spec.idle_power) * comp,
        mem=spec.mem * mem,
        bandwidth=spec.bandwidth * bw,
        gpu=gpu,
    )


def _can_improve(snapshot: SystemSnapshot, knowledge: Knowledge, budget: float) -> bool:
    below = any(
        snapshot.levels.get(s.id, 0) < knowledge.nominal_levels.get(s.id, s.max_level)
        for s in snapshot.services.values()
    )
    orphans = _qualified_orphans(snapshot)
    if not (orphans or below):
        return False
    planner = None
    if orphans:
        planner = _Planner(snapshot, knowledge)
        target = planner.evaluate(snapshot.levels, budget)
        if any(t in target.assignment for t in orphans):
            return True
    if not below:
        return False
    key = (
        tuple(sorted(snapshot.levels.items())),
        tuple((t.id, t.node, t.level) for t in snapshot.tasks.values()),
        tuple(sorted(knowledge.declared_failed)),
        tuple(sorted((n, v.status.value, v.reachable) for n, v in snapshot.nodes.items())),
        tuple(sorted(snapshot.quota_factors.items())),
    )
    need = knowledge._raise_memo.get(key)
    if need is None:
        need = (planner or _Planner(snapshot, knowledge)).raise_threshold()
        if len(knowledge._raise_memo) > 256:
            knowledge._raise_memo.clear()
        knowledge._raise_memo[key] = need
    return budget >= need - EPS


_CAPACITY_GAINS = frozenset({
    PerturbationKind.ENERGY_SURPLUS, PerturbationKind.NODE_JOIN, PerturbationKind.SWITCH_RECOVERY,
})


def plan(perturbations: Sequence[Perturbation], snapshot: SystemSnapshot, knowledge: Knowledge) -> ActionPlan:
    """Turn perceived perturbations into an ordered, attributable action list.

    Without perturbations the only possible work is the periodic consolidation
    pass; everything else returns an empty plan.
    """
    if not perturbations:
        return _self_optimize(snapshot, knowledge)
    kinds = {p.kind for p in perturbations}
    lost = {p.subject for p in perturbations if p.kind in (
        PerturbationKind.NODE_FAILURE, PerturbationKind.NODE_LEAVE, PerturbationKind.THERMAL_TRIP)}
    joining = {p.subject for p in perturbations if p.kind is PerturbationKind.NODE_JOIN}
    provenance = ";".join(p.tag for p in perturbations)
    planner = _Planner(snapshot, knowledge, lost, joining)
    factor = snapshot.quota_factors.get(QuotaResource.ENERGY.value, 1.0)
    budget = sustainable_power(snapshot.energy, snapshot.dt, factor)

    mode: list = []
    switches_down = bool(snapshot.switches) and not any(snapshot.switches.values())
    if switches_down:
        if not snapshot.amorphous:
            mode.append(EnterAmorphousMode())
            base_levels = dict(snapshot.levels)
        else:
            base_levels = dict(knowledge.saved_levels or snapshot.levels)
        rp = amorphous_mode(planner.services, base_levels, list(planner.cands.values()), snapshot.mesh, budget)
        target = Target(rp.levels, dict(rp.placement.assignment), sorted(rp.placement.unplaced), rp.placement.power)
    else:
        levels = dict(snapshot.levels)
        if snapshot.amorphous:
            mode.append(ExitAmorphousMode())
            levels = dict(knowledge.saved_levels or knowledge.nominal_levels)
        target, _ = planner.fit(levels, budget)
        if kinds & _CAPACITY_GAINS or snapshot.amorphous:
            target = planner.raise_levels(target, budget)

    actions = mode + _diff(snapshot, target)
    if (
        PerturbationKind.ENERGY_SURPLUS in kinds and knowledge.grid_charging_allowed
        and not snapshot.energy.grid_charging and snapshot.energy.breakdown.grid > 0
    ):
        actions.append(ChargeStorage(True))
    actions = [replace(a, provenance=provenance) for a in actions]
    reasons = _infeasibility(snapshot, planner, target, budget)
    return ActionPlan(actions, snapshot.version, bool(reasons), reasons)


def bootstrap_plan(snapshot: SystemSnapshot, knowledge: Knowledge) -> ActionPlan:
    """Initial configuration: bring services to nominal as far as energy allows."""
    planner = _Planner(snapshot, knowledge)
    factor = snapshot.quota_factors.get(QuotaResource.ENERGY.value, 1.0)
    budget = sustainable_power(snapshot.energy, snapshot.dt, factor)
    target, _ = planner.fit(knowledge.nominal_levels, budget)
    actions = [replace(a, provenance="self-configuration") for a in _diff(snapshot, target)]
    reasons = _infeasibility(snapshot, planner, target, budget)
    return ActionPlan(actions, snapshot.version, bool(reasons), reasons)


def _self_optimize(snapshot: SystemSnapshot, knowledge: Knowledge) -> ActionPlan:
    period = knowledge.consolidation_period
    if period <= 0 or snapshot.amorphous or snapshot.step - knowledge.last_consolidation < period:
        return ActionPlan([], snapshot.version)
    planner = _Planner(snapshot, knowledge)
    reqs = planner.requests(snapshot.levels)
    assignment = {
        tid: tv.node for tid, tv in snapshot.tasks.items()
        if tv.node in planner.cands and tid in reqs and snapshot.nodes[tv.node].status is Status.UP
    }
    active = [planner.cands[n] for n in sorted(set(assignment.values()))]
    moves = [a for a in consolidate(assignment, active, [reqs[t] for t in sorted(assignment)], knowledge.anti_affinity)]
    actions = [replace(a, provenance="self-optimization") for a in moves]
    return ActionPlan(actions, snapshot.version, self_optimization=True)


def _diff(snapshot: SystemSnapshot, target: Target) -> list:
    """Ordered actions turning the snapshot's placement into ``target``."""
    old, new = snapshot.levels, target.levels
    services = snapshot.services
    actions: list = []
    down = [s for s in services if new.get(s, 0) < old.get(s, 0)]
    for sid in sorted(down, key=lambda s: (-services[s].priority, s)):
        actions.append(SetServiceLevel(sid, new[sid]))
    for tid, tv in snapshot.tasks.items():
        if tv.node is not None and tid not in target.assignment and new.get(tv.service_id, 0) > 0:
            actions.append(StopTask(tid))
    for nid in sorted(set(target.assignment.values())):
        if snapshot.nodes[nid].status is Status.ENERGY_SHED:
            actions.append(PowerNodeOn(nid))
    up = [s for s in services if new.get(s, 0) > old.get(s, 0)]
    for sid in sorted(up, key=lambda s: (services[s].priority, s)):
        actions.append(SetServiceLevel(sid, new[sid]))
    for tid in sorted(target.assignment):
        dest = target.assignment[tid]
        cur = snapshot.tasks.get(tid)
        if cur is None:
            actions.append(StartTask(tid, dest))
        elif cur.node is None:
            if cur.last_node is not None and cur.last_node != dest:
                actions.append(MigrateTask(tid, cur.last_node, dest))
            else:
                actions.append(StartTask(tid, dest))
        elif cur.node != dest:
            actions.append(MigrateTask(tid, cur.node, dest))
    busy = set(target.assignment.values())
    for nid in sorted(snapshot.nodes):
        nv = snapshot.nodes[nid]
        if nv.present and nv.status is Status.UP and nid not in busy:
            actions.append(PowerNodeOff(nid))
    return actions


def _infeasibility(snapshot: SystemSnapshot, planner: _Planner, target: Target, budget: float) -> tuple[str, ...]:
    reasons = []
    served = {t.split("#")[0] for t in target.assignment}
    for s in planner.services:
        if s.priority <= planner.k.p_crit:
            lvl = target.levels.get(s.id, 0)
            if lvl < s.min_level or (s.min_level > 0 and s.id not in served):
                reasons.append(f"critical service {s.id} cannot be served at min_level")
    if target.power > budget + EPS:
        reasons.append(f"placement needs {target.power:.3f} W, budget {budget:.3f} W")
    return tuple(reasons)


# --- execute ------------------------------------------------------------------------


def action_event(action, world: World) -> dict:
    ev = {
        "step": world.step,
        "time": world.time,
        "kind": ACTION_KIND[type(action)],
        "subject": subject(action),
        "provenance": action.provenance,
    }
    if isinstance(action, StartTask):
        ev["node"] = action.node_id
    elif isinstance(action, MigrateTask):
        ev["source"], ev["target"] = action.source, action.target
    elif isinstance(action, SetServiceLevel):
        ev["level"] = action.level
    elif isinstance(action, ChargeStorage):
        ev["allow_grid"] = action.allow_grid
    return ev


def execute(plan: ActionPlan, world: World) -> list[dict]:
    """Apply the plan atomically and return one event per action.

    Raises StalePlanError (and changes nothing) when the world moved on since
    the snapshot the plan was built from.
    """
    if not plan.actions:
        return []
    world.apply(plan.actions, plan.based_on)
    return [action_event(a, world) for a in plan.actions]


# --- the loop -----------------------------------------------------------------------


@dataclass
class CycleReport:
    perturbations: list[Perturbation]
    plan: ActionPlan
    events: list[dict]
    phase: LoopPhase
    viability: InDomain | Breach
    retries: int = 0


class Controller:
    """Centralized MAPE-K loop; one ``cycle`` per simulation step."""

    def __init__(self, knowledge: Knowledge, domain: ViabilityDomain | None = None,
                 policies: Sequence[QuotaPolicy] = (), max_retries: int = 3):
        self.k = knowledge
        self.domain = domain or ViabilityDomain(knowledge.p_crit)
        self.policies = tuple(policies)
        self.max_retries = max_retries
        self.phase = LoopPhase.NOMINAL
        self.outside = 0  # consecutive cycles outside the viability domain
        self.breached = False

    def snapshot(self, world: World) -> SystemSnapshot:
        return monitor(world, self.k.horizon, self.policies)

    def bootstrap(self, world: World) -> list[dict]:
        snap = self.snapshot(world)
        self.k.members = {n for n, v in snap.nodes.items() if v.present and v.status is Status.UP}
        self.k.switch_view = dict(snap.switches)
        p = bootstrap_plan(snap, self.k)
        return execute(p, world)

    def cycle(self, world: World, before_execute: Callable[[World], None] | None = None) -> CycleReport:
        retries = 0
        while True:
            snap = self.snapshot(world)
            perts = analyze(snap, self.k)
            p = plan(perts, snap, self.k)
            if before_execute is not None and retries == 0:
                before_execute(world)
            try:
                events = execute(p, world)
                break
            except StalePlanError as exc:
                retries += 1
                if retries > self.max_retries:
                    events = [{
                        "step": world.step, "time": world.time, "kind": "PlanRejected",
                        "subject": "cluster", "provenance": "execute", "reason": str(exc),
                    }]
                    p = ActionPlan([], snap.version)
                    break
        verdict = viability_check(snap, self.domain)
        self.k.acknowledge(perts, p, snap)
        disturbed = bool(perts) or not verdict.ok
        settled = verdict.ok and not perts and not p.actions
        new = next_phase(self.phase, disturbed, settled)
        assert (self.phase, new) in ALLOWED_EDGES
        self.phase = new
        self.outside = 0 if verdict.ok else self.outside + 1
        self.breached = self.outside > self.k.k_max
        return CycleReport(perts, p, events, new, verdict, retries)
