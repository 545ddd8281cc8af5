"""Ground-truth cluster state: nodes, service levels, task placements, switches, energy.

The controller only ever sees this through ``monitor`` snapshots; the
simulator and ``World.apply`` are the only writers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

from ssdc.actions import (
    ChargeStorage, EnterAmorphousMode, ExitAmorphousMode, MigrateTask, PowerNodeOff,
    PowerNodeOn, SetServiceLevel, StartTask, StopTask,
)
from ssdc.devices import NodeSpec, NodeState, Status, initial_state, node_power
from ssdc.energy import EnergySystem
from ssdc.errors import StalePlanError
from ssdc.workload import Resources, Service, TaskInstance, ZERO


@dataclass
class Topology:
    """Core switches, which switches each node is cabled to, and the peer mesh."""

    switches: dict[str, bool]
    links: dict[str, tuple[str, ...]]
    mesh: tuple[tuple[str, str], ...] = ()
    _reach: dict[str, bool] = field(default_factory=dict, init=False, repr=False, compare=False)

    def any_switch_up(self) -> bool:
        return any(self.switches.values())

    def set_switch(self, switch_id: str, up: bool) -> None:
        self.switches[switch_id] = up
        self._reach.clear()

    def reachable(self, node_id: str) -> bool:
        hit = self._reach.get(node_id)
        if hit is None:
            hit = not self.switches or any(self.switches.get(s, False) for s in self.links.get(node_id, ()))
            self._reach[node_id] = hit
        return hit


def cable(specs: Sequence[NodeSpec], switch_ids: Sequence[str] = ("sw0", "sw1")) -> dict[str, tuple[str, ...]]:
    """Dual-homed nodes go to every switch; single-NIC nodes alternate in id order."""
    links: dict[str, tuple[str, ...]] = {}
    k = 0
    for spec in sorted(specs, key=lambda s: s.id):
        if not switch_ids or spec.nic_count == 0:
            links[spec.id] = ()
        elif spec.nic_count >= 2:
            links[spec.id] = tuple(switch_ids)
        else:
            links[spec.id] = (switch_ids[k % len(switch_ids)],)
            k += 1
    return links


def full_mesh(node_ids: Iterable[str]) -> tuple[tuple[str, str], ...]:
    return tuple(combinations(sorted(node_ids), 2))


@dataclass
class World:
    dt: float
    specs: dict[str, NodeSpec]
    states: dict[str, NodeState]
    services: dict[str, Service]
    levels: dict[str, int]
    energy: EnergySystem
    topology: Topology
    present: set[str]
    tasks: dict[str, TaskInstance] = field(default_factory=dict)
    last_node: dict[str, str] = field(default_factory=dict)
    heartbeats: dict[str, int] = field(default_factory=dict)
    amorphous: bool = False
    step: int = 0
    version: int = 0
    last_unmet: float = 0.0
    # Per-resource usage records (time, amount) read by quota policies.
    usage: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    # Per-node task power overheads (W), kept in step with placements.
    overhead: dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        dt: float,
        specs: Sequence[NodeSpec],
        services: Sequence[Service],
        energy: EnergySystem,
        topology: Topology,
        present: Iterable[str] | None = None,
        ambient: float = 25.0,
        soc_fraction: float = 1.0,
    ) -> "World":
        specs_by_id = {s.id: s for s in specs}
        states = {s.id: initial_state(s, ambient, soc_fraction) for s in specs}
        present_ids = set(specs_by_id) if present is None else set(present)
        for nid, st in states.items():
            if nid not in present_ids:
                st.status = Status.RETIRED
        world = cls(
            dt=dt,
            specs=specs_by_id,
            states=states,
            services={s.id: s for s in services},
            levels={s.id: 0 for s in services},
            energy=energy,
            topology=topology,
            present=present_ids,
        )
        world.heartbeats = {nid: -1 for nid in present_ids}
        world.refresh_utilization()
        return world

    @property
    def time(self) -> float:
        return self.step * self.dt

    def touch(self) -> None:
        self.version += 1

    # --- derived views ----------------------------------------------------------

    def reachable(self, node_id: str) -> bool:
        return self.amorphous or self.topology.reachable(node_id)

    def running(self, task: TaskInstance) -> bool:
        return (
            task.node is not None
            and self.states[task.node].is_up
            and self.reachable(task.node)
        )

    def served_levels(self) -> dict[str, int]:
        """A service is served at its level while at least one replica runs."""
        served = {sid: 0 for sid in self.services}
        for t in self.tasks.values():
            if t.level > 0 and self.running(t):
                served[t.service_id] = t.level
        return served

    def task_demand(self, task: TaskInstance) -> tuple[Resources, float]:
        lv = self.services[task.service_id].level(task.level)
        return lv.demand, lv.power_overhead

    def refresh_utilization(self) -> None:
        used = {nid: ZERO for nid in self.specs}
        over = {nid: 0.0 for nid in self.specs}
        assigned: dict[str, list[str]] = {nid: [] for nid in self.specs}
        for tid in sorted(self.tasks):
            t = self.tasks[tid]
            if t.node is None:
                continue
            d, o = self.task_demand(t)
            used[t.node] = used[t.node] + d
            over[t.node] += o
            assigned[t.node].append(tid)
        self.overhead = over
        for nid, spec in self.specs.items():
            st = self.states[nid]
            u = used[nid]
            st.assigned = assigned[nid]
            st.cpu_util = _ratio(u.cpu_mips, spec.cpu_mips)
            st.gpu_util = _ratio(u.gpu_mflops, spec.gpu.mflops if spec.gpu else 0.0)
            st.mem_util = _ratio(u.mem, spec.mem)
            st.bw_util = _ratio(u.bandwidth, spec.bandwidth)

    def node_powers(self) -> dict[str, float]:
        over = self.overhead
        return {nid: node_power(self.specs[nid], st, over[nid]) for nid, st in self.states.items()}

    def demand(self) -> float:
        return math.fsum(self.node_powers().values())

    # --- ground-truth transitions ------------------------------------------------

    def drop_tasks(self, node_id: str) -> list[str]:
        """Tasks on ``node_id`` stop running; they stay defined but unplaced."""
        lost = []
        for tid in sorted(self.tasks):
            t = self.tasks[tid]
            if t.node == node_id:
                self.last_node[tid] = node_id
                t.node = None
                lost.append(tid)
        self.states[node_id].assigned.clear()
        self.refresh_utilization()
        return lost

    def set_status(self, node_id: str, status: Status) -> list[str]:
        st = self.states[node_id]
        lost = self.drop_tasks(node_id) if status is not Status.UP else []
        st.status = status
        self.refresh_utilization()
        self.touch()
        return lost

    def join(self, node_id: str) -> None:
        self.present.add(node_id)
        self.states[node_id].status = Status.UP
        self.heartbeats[node_id] = self.step
        self.touch()

    def set_switch(self, switch_id: str, up: bool) -> None:
        self.topology.set_switch(switch_id, up)
        self.touch()

    def _set_level(self, service_id: str, level: int) -> None:
        svc = self.services[service_id]
        self.levels[service_id] = level
        if level == 0:
            for tid in svc.task_ids():
                self.tasks.pop(tid, None)
                self.last_node.pop(tid, None)
            return
        for tid in svc.task_ids():
            if tid in self.tasks:
                self.tasks[tid].level = level
            else:
                self.tasks[tid] = TaskInstance(tid, service_id, level, None, svc.requires_gpu)

    # --- actuators ---------------------------------------------------------------

    def apply(self, actions: Sequence, version: int) -> None:
        """Apply ``actions`` atomically: every action is checked on a shadow copy first."""
        if version != self.version:
            raise StalePlanError(f"plan built on version {version}, world is at {self.version}")
        problems = self._validate(actions)
        if problems:
            raise StalePlanError("; ".join(problems))
        for a in actions:
            if isinstance(a, SetServiceLevel):
                self._set_level(a.service_id, a.level)
            elif isinstance(a, StartTask):
                self.tasks[a.task_id].node = a.node_id
            elif isinstance(a, StopTask):
                t = self.tasks[a.task_id]
                self.last_node[a.task_id] = t.node
                t.node = None
            elif isinstance(a, MigrateTask):
                self.tasks[a.task_id].node = a.target
            elif isinstance(a, PowerNodeOn):
                self.states[a.node_id].status = Status.UP
                self.heartbeats[a.node_id] = self.step
            elif isinstance(a, PowerNodeOff):
                self.states[a.node_id].status = Status.ENERGY_SHED
            elif isinstance(a, ChargeStorage):
                self.energy.allow_grid_charging = a.allow_grid
            elif isinstance(a, EnterAmorphousMode):
                self.amorphous = True
            elif isinstance(a, ExitAmorphousMode):
                self.amorphous = False
        if actions:
            self.refresh_utilization()
            self.touch()

    def _validate(self, actions: Sequence) -> list[str]:
        status = {nid: st.status for nid, st in self.states.items()}
        where = {tid: t.node for tid, t in self.tasks.items()}
        last = dict(self.last_node)
        amorphous = self.amorphous
        problems = []

        def usable(nid: str) -> bool:
            return nid in self.present and status.get(nid) is Status.UP

        for a in actions:
            if isinstance(a, SetServiceLevel):
                svc = self.services.get(a.service_id)
                if svc is None or not 0 <= a.level <= svc.max_level:
                    problems.append(f"{a}: unknown service or level")
                    continue
                if a.level == 0:
                    for tid in svc.task_ids():
                        where.pop(tid, None)
                else:
                    for tid in svc.task_ids():
                        where.setdefault(tid, None)
            elif isinstance(a, StartTask):
                if a.task_id not in where or where[a.task_id] is not None:
                    problems.append(f"{a}: task missing or already placed")
                elif not usable(a.node_id):
                    problems.append(f"{a}: node not up")
                else:
                    where[a.task_id] = a.node_id
            elif isinstance(a, StopTask):
                if where.get(a.task_id) is None:
                    problems.append(f"{a}: task not running")
                else:
                    last[a.task_id] = where[a.task_id]
                    where[a.task_id] = None
            elif isinstance(a, MigrateTask):
                cur = where.get(a.task_id, "missing")
                if not (cur == a.source or (cur is None and last.get(a.task_id) == a.source)):
                    problems.append(f"{a}: task not on source")
                elif not usable(a.target):
                    problems.append(f"{a}: target not up")
                else:
                    where[a.task_id] = a.target
            elif isinstance(a, PowerNodeOn):
                if a.node_id not in self.present or status.get(a.node_id) is not Status.ENERGY_SHED:
                    problems.append(f"{a}: node is not in standby")
                else:
                    status[a.node_id] = Status.UP
            elif isinstance(a, PowerNodeOff):
                if status.get(a.node_id) is not Status.UP:
                    problems.append(f"{a}: node is not up")
                elif any(n == a.node_id for n in where.values()):
                    problems.append(f"{a}: node still carries tasks")
                else:
                    status[a.node_id] = Status.ENERGY_SHED
            elif isinstance(a, EnterAmorphousMode):
                if amorphous:
                    problems.append("already in amorphous mode")
                amorphous = True
            elif isinstance(a, ExitAmorphousMode):
                if not amorphous:
                    problems.append("not in amorphous mode")
                amorphous = False
            elif not isinstance(a, ChargeStorage):
                problems.append(f"unknown action {a!r}")
        return problems


def _ratio(used: float, cap: float) -> float:
    if used <= 0:
        return 0.0
    if cap <= 0:
        return 1.0
    return min(1.0, used / cap)
