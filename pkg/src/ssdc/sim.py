"""Deterministic discrete-time runs: world physics, failure injection, one control cycle per step.

Per step, in this order:
  1. repairs and thermal restarts whose time has come
  2. injections: scripted events, then one uniform draw per Up node in id order
  3. heartbeats from every Up node
  4. one control cycle (monitor, analyze, plan, execute)
  5. energy draw and storage charging; brown-out sheds the least efficient nodes
  6. thermal update (sub-stepped for stability); trips shut nodes down
  7. accounting: availability, credited computation, viability, phase

A single ``random.Random(seed)`` feeds every draw.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ssdc.controller import (
    Controller, Knowledge, LoopPhase, Perturbation, PerturbationKind, SystemSnapshot,
    ViabilityDomain, monitor, world_viability,
)
from ssdc.devices import NodeSpec, NodeState, Status, efficiency, sample_failure, stable_substeps, step_thermal
from ssdc.energy import EnergyLedger, EnergySystem, PhonePool, UpsBank
from ssdc.scenario import GRID_SUBJECT, Scenario
from ssdc.world import Topology, World, cable, full_mesh

EPS = 1e-9
THERMAL_SETTLED = 1e-9  # degC


def inject(
    schedule: Sequence[tuple[int, Perturbation]],
    step: int,
    rng: random.Random | None = None,
    nodes: Sequence[tuple[NodeSpec, NodeState]] = (),
    dt: float = 60.0,
) -> list[Perturbation]:
    """Scripted perturbations due at ``step`` (schedule order), then sampled failures.

    Sampling is off when ``rng`` is None; otherwise each Up node, in id order,
    consumes exactly one draw.
    """
    out = [p for s, p in schedule if s == step]
    if rng is not None:
        for spec, state in sorted(nodes, key=lambda n: n[0].id):
            if state.status is Status.UP and sample_failure(spec, dt, rng):
                out.append(Perturbation(PerturbationKind.NODE_FAILURE, spec.id))
    return out


@dataclass
class NodeAccount:
    energy_wh: float = 0.0
    mi: float = 0.0
    mflop: float = 0.0
    up_steps: int = 0


@dataclass
class RunResult:
    scenario: Scenario
    events: list[dict]
    ledger: EnergyLedger
    availability: dict[str, float]
    served_fraction: dict[str, float]
    mean_level: dict[str, float]
    time_in_viability: float
    phases: list[LoopPhase]
    final: SystemSnapshot
    breach_at_end: bool
    breach_steps: list[int] = field(default_factory=list)
    accounts: dict[str, NodeAccount] = field(default_factory=dict)
    joins: int = 0
    leaves: int = 0
    initial_nodes: int = 0
    final_nodes: int = 0
    perceived: list[tuple[int, str]] = field(default_factory=list)
    served_timeline: list[dict[str, int]] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return self.scenario.duration * self.scenario.dt

    def first_phase_at_or_after(self, phase: LoopPhase, step: int) -> int | None:
        for k in range(step, len(self.phases)):
            if self.phases[k] is phase:
                return k
        return None


def build_world(sc: Scenario) -> World:
    specs = list(sc.all_nodes)
    topo = Topology(
        switches={s: True for s in sc.switches},
        links=cable(specs, sc.switches),
        mesh=sc.mesh if sc.mesh is not None else full_mesh(n.id for n in specs),
    )
    en = sc.energy
    energy = EnergySystem(
        pv=en.pv,
        grid=en.grid,
        ups=UpsBank(en.ups.capacity, en.ups.soc, en.ups.charge_efficiency, en.ups.discharge_efficiency,
                    en.ups.max_rate) if en.ups else None,
        allow_grid_charging=en.grid_charging,
        pv_intensity=en.pv_intensity,
    )
    world = World.build(sc.dt, specs, sc.services, energy, topo, present=[n.id for n in sc.nodes],
                        ambient=sc.ambient_at(0), soc_fraction=en.phone_soc)
    phones = [(world.specs[n.id], world.states[n.id]) for n in specs if n.battery is not None]
    if phones:
        energy.phone_pool = PhonePool(
            phones,
            reserve_fraction=en.phone_reserve,
            admin_reserve={s.id: s.idle_power * en.admin_reserve_hours for s, _ in phones},
        )
    return world


def build_controller(sc: Scenario) -> Controller:
    k = Knowledge(
        services={s.id: s for s in sc.services},
        nominal_levels=dict(sc.nominal_levels),
        p_crit=sc.p_crit,
        k_max=sc.k_max,
        heartbeat_timeout=sc.heartbeat_timeout,
        horizon=sc.horizon,
        consolidation_period=sc.consolidation_period,
        raise_margin=sc.raise_margin,
        grid_charging_allowed=sc.energy.grid_charging,
    )
    return Controller(k, ViabilityDomain(sc.p_crit), sc.policies)


class Simulation:
    """One run, steppable; ``run`` drives it to the end."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.rng = random.Random(scenario.seed)
        self.world = build_world(scenario)
        self.ctl = build_controller(scenario)
        self.events: list[dict] = []
        self.repair_at: dict[str, int] = {}
        self.phases: list[LoopPhase] = []
        self.accounts = {nid: NodeAccount() for nid in self.world.specs}
        n = len(scenario.services)
        self.services = sorted(scenario.services, key=lambda s: s.id)
        self.avail_steps = {s.id: 0 for s in self.services}
        self.served_steps = {s.id: 0 for s in self.services}
        self.level_sum = {s.id: 0 for s in self.services}
        self.viable_steps = 0
        self.breach_steps: list[int] = []
        self.perceived: list[tuple[int, str]] = []
        self.served_timeline: list[dict[str, int]] = []
        self.joins = self.leaves = 0
        self.initial_nodes = len(self.world.present)
        self._was_breached = False
        self._n = n
        self._windows = max((p.window for p in scenario.policies), default=0.0)
        self.before_execute: Callable[[World], None] | None = None
        self._emit_list(self.ctl.bootstrap(self.world))

    # --- events --------------------------------------------------------------------

    def _emit(self, kind: str, subject: str, provenance: str, **extra) -> None:
        ev = {"step": self.world.step, "time": self.world.time, "kind": kind, "subject": subject,
              "provenance": provenance}
        ev.update(extra)
        self.events.append(ev)

    def _emit_list(self, evs: list[dict]) -> None:
        self.events.extend(evs)

    # --- one step ------------------------------------------------------------------

    def step(self, k: int) -> None:
        w, sc = self.world, self.sc
        w.step = k
        self._recoveries(k)
        for p in inject(sc.injections, k, self.rng if sc.random_failures else None,
                        [(w.specs[n], w.states[n]) for n in sorted(w.present)], sc.dt):
            prov = "scenario" if (k, p) in sc.injections else "random"
            self._apply_injection(p, k, prov)
        for nid in sorted(w.present):
            if w.states[nid].is_up:
                w.heartbeats[nid] = k

        report = self.ctl.cycle(w, self.before_execute)
        for p in report.perturbations:
            self.perceived.append((k, p.tag))
            self._emit(p.kind.value, p.subject, "analyze", magnitude=p.magnitude)
        if report.plan.infeasible:
            self._emit("PlanInfeasible", "cluster", "plan", reasons=list(report.plan.reasons))
        self._emit_list(report.events)
        prev = self.phases[-1] if self.phases else LoopPhase.NOMINAL
        if report.phase is not prev:
            self._emit("Phase", report.phase.value, "loop")
        self.phases.append(report.phase)
        if self.ctl.breached and not self._was_breached:
            self._emit("ViabilityBreach", "cluster", "loop", violations=list(report.viability.violations))
            self.breach_steps.append(k)
        elif self._was_breached and not self.ctl.breached:
            self._emit("ViabilityRestored", "cluster", "loop")
        self._was_breached = self.ctl.breached

        powers = w.node_powers()
        demand = math.fsum(powers.values())
        rec = w.energy.step(demand, sc.dt, w.time, k)
        w.last_unmet = rec.unmet
        scale = rec.consumed / rec.demand if rec.demand > 0 else 0.0
        for nid, p in powers.items():
            if p > 0:
                self.accounts[nid].energy_wh += p * sc.dt / 3600.0 * scale
                self.accounts[nid].up_steps += 1
        if rec.unmet > EPS:
            self._brownout(powers, rec.consumed * 3600.0 / sc.dt)
        self._credit(k)
        self._thermal(k)
        self._account(k)

    def _recoveries(self, k: int) -> None:
        w = self.world
        for nid in sorted(self.repair_at):
            if self.repair_at[nid] <= k and w.states[nid].status is Status.FAILED:
                del self.repair_at[nid]
                w.states[nid].temperature = self.sc.ambient_at(k)
                w.set_status(nid, Status.UP)
                self._emit("Repair", nid, "physics")
        for nid in sorted(w.present):
            st = w.states[nid]
            spec = w.specs[nid]
            if st.status is Status.THERMAL and st.temperature <= spec.thermal_threshold - self.sc.thermal_hysteresis:
                w.set_status(nid, Status.UP)
                self._emit("ThermalRestart", nid, "physics")

    def _apply_injection(self, p: Perturbation, k: int, prov: str) -> None:
        w = self.world
        kind, nid = p.kind, p.subject
        self._emit("Inject", nid, prov, perturbation=kind.value)
        if kind is PerturbationKind.NODE_FAILURE:
            if nid in w.present and w.states[nid].status in (Status.UP, Status.ENERGY_SHED):
                w.set_status(nid, Status.FAILED)
                if self.sc.repair_steps is not None:
                    self.repair_at[nid] = k + self.sc.repair_steps
        elif kind is PerturbationKind.NODE_JOIN:
            if nid not in w.present:
                w.join(nid)
                self.joins += 1
        elif kind is PerturbationKind.NODE_LEAVE:
            if nid in w.present:
                w.set_status(nid, Status.RETIRED)
                w.present.discard(nid)
                self.repair_at.pop(nid, None)
                self.leaves += 1
        elif kind is PerturbationKind.THERMAL_TRIP:
            st = w.states[nid]
            if st.status is Status.UP:
                st.temperature = max(st.temperature, w.specs[nid].thermal_threshold + 0.1)
                w.set_status(nid, Status.THERMAL)
        elif kind is PerturbationKind.SWITCH_FAILURE:
            w.set_switch(nid, False)
        elif kind is PerturbationKind.SWITCH_RECOVERY:
            w.set_switch(nid, True)
        elif kind is PerturbationKind.ENERGY_SHORTFALL and nid == GRID_SUBJECT:
            w.energy.grid_connected = False
            w.touch()
        elif kind is PerturbationKind.ENERGY_SURPLUS and nid == GRID_SUBJECT:
            w.energy.grid_connected = True
            w.touch()

    def _brownout(self, powers: dict[str, float], delivered: float) -> None:
        """Supply fell short: switch off the least efficient nodes until the rest is covered."""
        w = self.world
        on = [nid for nid, p in powers.items() if p > 0]
        on.sort(key=lambda n: (efficiency(w.specs[n]).mips_per_joule, n))
        load = math.fsum(powers[n] for n in on)
        for nid in on:
            if load <= delivered + EPS:
                break
            load -= powers[nid]
            w.set_status(nid, Status.ENERGY_SHED)
            self._emit("EnergyShed", nid, "physics")

    def _credit(self, k: int) -> None:
        w, dt = self.world, self.sc.dt
        served = w.served_levels()
        usage_mi = usage_mem = usage_bw = 0.0
        for tid in sorted(w.tasks):
            t = w.tasks[tid]
            svc = w.services[t.service_id]
            if not w.running(t) or served[t.service_id] < max(1, svc.min_level):
                continue
            d, _ = w.task_demand(t)
            acc = self.accounts[t.node]
            acc.mi += d.cpu_mips * dt
            acc.mflop += d.gpu_mflops * dt
            usage_mi += d.cpu_mips * dt
            usage_mem += d.mem * dt
            usage_bw += d.bandwidth * dt
        if self.sc.policies:
            rec = w.energy.ledger.records[-1]
            for key, amount in (("energy", rec.consumed), ("computation", usage_mi),
                                ("memory", usage_mem), ("communication", usage_bw)):
                hist = w.usage.setdefault(key, [])
                hist.append((w.time, amount))
                while hist and hist[0][0] <= w.time - self._windows:
                    hist.pop(0)

    def _thermal(self, k: int) -> None:
        w, dt = self.world, self.sc.dt
        ambient = self.sc.ambient_at(k)
        powers = w.node_powers()
        for nid in sorted(w.present):
            spec, st = w.specs[nid], w.states[nid]
            p = powers[nid]
            drive = p if st.is_up else 0.0
            if spec.dissipation > 0 and abs(st.temperature - ambient - drive / spec.dissipation) < THERMAL_SETTLED:
                continue  # at the update's fixed point; sub-steps would not move it
            n = stable_substeps(spec, dt)
            for _ in range(n):
                res = step_thermal(st, spec, p if st.is_up else 0.0, ambient, dt / n)
                if res.shutdown:
                    w.set_status(nid, Status.THERMAL)
                    self._emit("ThermalShutdown", nid, "physics", temperature=res.temperature)
                    p = 0.0

    def _account(self, k: int) -> None:
        w = self.world
        served = w.served_levels()
        self.served_timeline.append(served)
        for s in self.services:
            lvl = served[s.id]
            self.level_sum[s.id] += lvl
            if lvl >= s.min_level:
                self.avail_steps[s.id] += 1
            if lvl > 0:
                self.served_steps[s.id] += 1
        if world_viability(w, self.ctl.domain).ok:
            self.viable_steps += 1

    def result(self) -> RunResult:
        n = max(1, len(self.phases))
        return RunResult(
            scenario=self.sc,
            events=self.events,
            ledger=self.world.energy.ledger,
            availability={s: c / n for s, c in self.avail_steps.items()},
            served_fraction={s: c / n for s, c in self.served_steps.items()},
            mean_level={s: c / n for s, c in self.level_sum.items()},
            time_in_viability=self.viable_steps / n,
            phases=list(self.phases),
            final=monitor(self.world, horizon=0),
            breach_at_end=self.ctl.breached,
            breach_steps=list(self.breach_steps),
            accounts=self.accounts,
            joins=self.joins,
            leaves=self.leaves,
            initial_nodes=self.initial_nodes,
            final_nodes=len(self.world.present),
            perceived=list(self.perceived),
            served_timeline=self.served_timeline,
        )


def run(scenario: Scenario) -> RunResult:
    sim = Simulation(scenario)
    for k in range(scenario.duration):
        sim.step(k)
    return sim.result()
