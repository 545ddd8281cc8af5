"""Scenario files: YAML with ``nodes``, ``services``, ``energy``, ``policies`` and ``injections`` sections.

Validation is total: every problem found is collected and reported together
in one ScenarioError. See ``describe_format`` for the schema.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ssdc.controller import Perturbation, PerturbationKind
from ssdc.devices import NodeSpec, load_inventory, load_profiles, spec_from_dict
from ssdc.energy import (
    DEFAULT_PHONE_RESERVE, GRID_INTENSITY_FR, PV_LIFECYCLE_INTENSITY, GridSource, PvTrace,
    load_pv_trace, synthetic_pv_trace,
)
from ssdc.errors import ScenarioError, SsdcError
from ssdc.workload import QuotaPolicy, Service, load_catalog, service_from_dict

CONFIG_ENV = "SSDC_CONFIG_DIR"
SHIPPED_SCENARIOS = Path(__file__).parent / "data" / "scenarios"

# Subjects that energy injections act on.
GRID_SUBJECT = "grid"


@dataclass(frozen=True)
class UpsConfig:
    capacity: float
    soc: float
    charge_efficiency: float = 0.9
    discharge_efficiency: float = 0.9
    max_rate: float = 500.0


@dataclass(frozen=True)
class EnergyConfig:
    pv: PvTrace | None = None
    grid: GridSource | None = None
    ups: UpsConfig | None = None
    phone_reserve: float = DEFAULT_PHONE_RESERVE
    admin_reserve_hours: float = 1.0
    grid_charging: bool = True
    pv_intensity: float = PV_LIFECYCLE_INTENSITY
    phone_soc: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: int
    dt: float
    nodes: tuple[NodeSpec, ...]
    services: tuple[Service, ...]
    energy: EnergyConfig = EnergyConfig()
    reserve_nodes: tuple[NodeSpec, ...] = ()
    nominal_levels: dict[str, int] = field(default_factory=dict)
    policies: tuple[QuotaPolicy, ...] = ()
    injections: tuple[tuple[int, Perturbation], ...] = ()
    random_failures: bool = False
    repair_steps: int | None = None
    seed: int = 0
    p_crit: int = 1
    k_max: int = 5
    heartbeat_timeout: int = 1
    horizon: int = 60
    consolidation_period: int = 60
    raise_margin: float = 0.1
    switches: tuple[str, ...] = ("sw0", "sw1")
    mesh: tuple[tuple[str, str], ...] | None = None  # None: full mesh
    ambient: tuple[float, ...] = (25.0,)
    thermal_hysteresis: float = 5.0
    baseline: tuple[NodeSpec, ...] = ()
    source: str = ""

    def ambient_at(self, step: int) -> float:
        return self.ambient[step % len(self.ambient)]

    @property
    def all_nodes(self) -> tuple[NodeSpec, ...]:
        return self.nodes + self.reserve_nodes


def resolve(path: str | Path) -> Path:
    """Find a scenario: as given, then under $SSDC_CONFIG_DIR, then among the shipped ones."""
    p = Path(path)
    if p.exists():
        return p
    roots = [Path(os.environ[CONFIG_ENV])] if os.environ.get(CONFIG_ENV) else []
    roots.append(SHIPPED_SCENARIOS)
    for root in roots:
        for cand in (root / p, root / f"{p}.yaml"):
            if cand.exists():
                return cand
    return p


def load_scenario(path: str | Path, overrides: dict | None = None) -> Scenario:
    p = resolve(path)
    try:
        with p.open() as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ScenarioError([f"scenario file not found: {path}"]) from None
    except yaml.YAMLError as exc:
        raise ScenarioError([f"{p}: not valid YAML ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ScenarioError([f"{p}: top level must be a mapping"])
    raw.update(overrides or {})
    return build_scenario(raw, base_dir=p.parent, source=str(p))


def build_scenario(raw: dict, base_dir: str | Path = ".", source: str = "") -> Scenario:
    """Validate a parsed scenario mapping; raises ScenarioError listing every problem."""
    base = Path(base_dir)
    errors: list[str] = []
    known = {
        "name", "duration", "dt", "seed", "random_failures", "repair_steps", "nodes", "inventory",
        "reserve_nodes", "profiles", "services", "levels", "energy", "policies", "injections",
        "viability", "controller", "network", "ambient", "thermal_hysteresis", "baseline",
    }
    for key in sorted(set(raw) - known):
        errors.append(f"unknown top-level key {key!r}")

    duration = _num(raw.get("duration", 60), "duration", errors, int)
    dt = _num(raw.get("dt", 60.0), "dt", errors)
    if duration is not None and duration < 1:
        errors.append("duration must be >= 1 step")
    if dt is not None and dt <= 0:
        errors.append("dt must be > 0")

    profiles = None
    if raw.get("profiles"):
        pp = base / raw["profiles"]
        if pp.exists():
            profiles = load_profiles(pp)
        else:
            errors.append(f"profiles file not found: {pp}")
    nodes = _nodes(raw.get("nodes", []), raw.get("inventory"), base, profiles, errors, "nodes")
    reserve = _nodes(raw.get("reserve_nodes", []), None, base, profiles, errors, "reserve_nodes")
    baseline = _nodes(_section(raw.get("baseline"), "nodes", []), _section(raw.get("baseline"), "inventory", None),
                      base, profiles, errors, "baseline")
    ids = [n.id for n in nodes + reserve]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        errors.append(f"duplicate node id {dup!r}")

    services = _services(raw.get("services", "default"), base, errors)
    svc_ids = {s.id for s in services}
    levels = {}
    for sid, lvl in (raw.get("levels") or {}).items():
        svc = next((s for s in services if s.id == sid), None)
        if svc is None:
            errors.append(f"levels: unknown service {sid!r}")
        elif not isinstance(lvl, int) or not 0 <= lvl <= svc.max_level:
            errors.append(f"levels: {sid} level {lvl!r} outside [0, {svc.max_level}]")
        else:
            levels[sid] = lvl
    for s in services:
        levels.setdefault(s.id, s.max_level)

    steps = duration or 1
    energy = _energy(raw.get("energy") or {}, base, dt or 60.0, steps, errors)

    policies = []
    for i, pd in enumerate(raw.get("policies") or []):
        try:
            pd = dict(pd)
            if "schedule" in pd:
                pd["schedule"] = tuple(tuple(float(x) for x in w) for w in pd["schedule"])
            policies.append(QuotaPolicy(**pd))
        except (TypeError, ValueError, SsdcError) as exc:
            errors.append(f"policies[{i}]: {exc}")

    network = raw.get("network") or {}
    switches = tuple(str(s) for s in network.get("switches", ("sw0", "sw1")))
    mesh = None
    if "mesh" in network and network["mesh"] != "full":
        mesh = []
        for e in network["mesh"] or []:
            if len(e) != 2 or any(x not in ids for x in e):
                errors.append(f"network.mesh: bad edge {e!r}")
            else:
                mesh.append((str(e[0]), str(e[1])))
        mesh = tuple(mesh)

    injections = []
    for i, inj in enumerate(raw.get("injections") or []):
        try:
            step = int(inj["step"])
            kind = PerturbationKind(inj["kind"])
            subj = str(inj["subject"])
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"injections[{i}]: needs step, kind and subject ({exc})")
            continue
        if duration is not None and not 0 <= step < duration:
            errors.append(f"injections[{i}]: step {step} outside [0, {duration})")
        if kind in (PerturbationKind.SWITCH_FAILURE, PerturbationKind.SWITCH_RECOVERY):
            if subj not in switches:
                errors.append(f"injections[{i}]: unknown switch {subj!r}")
        elif kind in (PerturbationKind.ENERGY_SHORTFALL, PerturbationKind.ENERGY_SURPLUS):
            if subj != GRID_SUBJECT:
                errors.append(f"injections[{i}]: energy injections act on {GRID_SUBJECT!r}")
        elif subj not in ids:
            errors.append(f"injections[{i}]: unknown node {subj!r}")
        elif kind is PerturbationKind.NODE_JOIN and subj not in {n.id for n in reserve}:
            errors.append(f"injections[{i}]: only reserve nodes can join ({subj!r})")
        injections.append((step, Perturbation(kind, subj, float(inj.get("magnitude", 0.0)))))

    via = raw.get("viability") or {}
    ctl = raw.get("controller") or {}
    p_crit = _num(via.get("p_crit", 1), "viability.p_crit", errors, int)
    k_max = _num(via.get("k_max", 5), "viability.k_max", errors, int)
    timeout = _num(ctl.get("heartbeat_timeout", 1), "controller.heartbeat_timeout", errors, int)
    horizon = _num(ctl.get("horizon", 60), "controller.horizon", errors, int)
    period = _num(ctl.get("consolidation_period", 60), "controller.consolidation_period", errors, int)
    margin = _num(ctl.get("raise_margin", 0.1), "controller.raise_margin", errors)
    if k_max is not None and k_max < 1:
        errors.append("viability.k_max must be >= 1")
    if timeout is not None and timeout < 1:
        errors.append("controller.heartbeat_timeout must be >= 1")
    if horizon is not None and horizon < 1:
        errors.append("controller.horizon must be >= 1")
    if margin is not None and not 0 <= margin < 1:
        errors.append("controller.raise_margin must lie in [0, 1)")

    ambient = _ambient(raw.get("ambient", 25.0), dt or 60.0, errors)
    repair = raw.get("repair_steps", 30)
    if repair is not None and (not isinstance(repair, int) or repair < 1):
        errors.append("repair_steps must be a positive integer or null")

    if errors:
        raise ScenarioError(errors)
    return Scenario(
        name=str(raw.get("name", Path(source).stem if source else "scenario")),
        duration=duration,
        dt=float(dt),
        nodes=tuple(nodes),
        services=tuple(services),
        energy=energy,
        reserve_nodes=tuple(reserve),
        nominal_levels=levels,
        policies=tuple(policies),
        injections=tuple(injections),
        random_failures=bool(raw.get("random_failures", False)),
        repair_steps=repair,
        seed=int(raw.get("seed", 0)),
        p_crit=p_crit,
        k_max=k_max,
        heartbeat_timeout=timeout,
        horizon=horizon,
        consolidation_period=period,
        raise_margin=float(margin),
        switches=switches,
        mesh=mesh,
        ambient=ambient,
        thermal_hysteresis=float(raw.get("thermal_hysteresis", 5.0)),
        baseline=tuple(baseline),
        source=source,
    )


def _section(d: Any, key: str, default: Any) -> Any:
    return d.get(key, default) if isinstance(d, dict) else default


def _num(value: Any, name: str, errors: list[str], kind=float):
    try:
        if kind is int and (isinstance(value, bool) or (isinstance(value, float) and not value.is_integer())):
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        errors.append(f"{name} must be a number, got {value!r}")
        return None


def _nodes(entries, inventory, base: Path, profiles, errors: list[str], where: str) -> list[NodeSpec]:
    out: list[NodeSpec] = []
    if inventory:
        path = base / inventory
        if not path.exists():
            errors.append(f"{where}: inventory file not found: {path}")
        else:
            try:
                out.extend(load_inventory(path, profiles))
            except (SsdcError, ValueError, KeyError) as exc:
                errors.append(f"{where}: {path}: {exc}")
    for i, entry in enumerate(entries or []):
        if not isinstance(entry, dict):
            errors.append(f"{where}[{i}]: must be a mapping")
            continue
        entry = dict(entry)
        count = entry.pop("count", None)
        if count is None:
            items = [entry]
        else:
            prefix = entry.pop("prefix", entry.pop("id", entry.get("profile", entry.get("kind", "n"))))
            items = [{**entry, "id": f"{prefix}{k:02d}"} for k in range(1, int(count) + 1)]
        for item in items:
            try:
                out.append(spec_from_dict(item, profiles))
            except (SsdcError, ValueError, TypeError) as exc:
                errors.append(f"{where}[{i}]: {exc}")
    return out


def _services(spec, base: Path, errors: list[str]) -> list[Service]:
    try:
        if spec in (None, "default"):
            out = load_catalog()
        elif isinstance(spec, str):
            path = base / spec
            if not path.exists():
                errors.append(f"services: catalog file not found: {path}")
                return []
            out = load_catalog(path)
        else:
            out = []
            for i, d in enumerate(spec):
                try:
                    out.append(service_from_dict(d))
                except (SsdcError, ValueError, KeyError, TypeError) as exc:
                    errors.append(f"services[{i}]: {exc}")
    except (SsdcError, ValueError, KeyError, TypeError) as exc:
        errors.append(f"services: {exc}")
        return []
    ids = [s.id for s in out]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        errors.append(f"duplicate service id {dup!r}")
    return out


def _energy(d: dict, base: Path, dt: float, steps: int, errors: list[str]) -> EnergyConfig:
    pv = None
    pvd = d.get("pv")
    try:
        if isinstance(pvd, dict) and "file" in pvd:
            path = base / pvd["file"]
            if not path.exists():
                errors.append(f"energy.pv: trace file not found: {path}")
            else:
                pv = load_pv_trace(path, dt)
                if pvd.get("scale") is not None:
                    pv = PvTrace(pv.start_time, pv.dt, [w * float(pvd["scale"]) for w in pv.watts])
        elif isinstance(pvd, dict) and "synthetic" in pvd:
            syn = dict(pvd["synthetic"])
            days = int(syn.pop("days", math.ceil(steps * dt / 86400.0)))
            pv = synthetic_pv_trace(days, dt, float(syn.pop("peak")), **syn)
        elif pvd is not None:
            errors.append("energy.pv needs 'file' or 'synthetic'")
    except (SsdcError, ValueError, TypeError, KeyError) as exc:
        errors.append(f"energy.pv: {exc}")
    if pv is not None:
        if isinstance(pvd, dict) and pvd.get("repeat") and pv.watts:
            reps = math.ceil(steps / len(pv.watts))
            pv = PvTrace(pv.start_time, pv.dt, list(pv.watts) * reps)
        if len(pv.watts) < steps:
            errors.append(f"energy.pv: trace has {len(pv.watts)} steps, scenario needs {steps}")

    grid = None
    gd = d.get("grid")
    if gd is not None:
        try:
            avail = gd.get("available")
            if gd.get("daily") is not None:
                days = math.ceil(steps * dt / 86400.0)
                avail = list(avail or []) + [
                    (86400.0 * k + 3600.0 * float(a), 86400.0 * k + 3600.0 * float(b))
                    for k in range(days) for a, b in gd["daily"]
                ]
                avail.sort()
            grid = GridSource(
                max_power=float(gd.get("max_power", 0.0)),
                carbon_intensity=float(gd.get("intensity", GRID_INTENSITY_FR)),
                available=[(float(a), float(b)) for a, b in avail] if avail is not None else None,
            )
        except (SsdcError, ValueError, TypeError, AttributeError) as exc:
            errors.append(f"energy.grid: {exc}")

    ups = None
    ud = d.get("ups")
    if ud is not None:
        try:
            cap = float(ud["capacity"])
            ups = UpsConfig(
                capacity=cap,
                soc=float(ud.get("soc", cap)),
                charge_efficiency=float(ud.get("charge_efficiency", 0.9)),
                discharge_efficiency=float(ud.get("discharge_efficiency", 0.9)),
                max_rate=float(ud.get("max_rate", 500.0)),
            )
            if not 0 <= ups.soc <= ups.capacity:
                errors.append("energy.ups: soc must lie in [0, capacity]")
            for eff in (ups.charge_efficiency, ups.discharge_efficiency):
                if not 0 < eff <= 1:
                    errors.append("energy.ups: efficiencies must lie in (0, 1]")
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"energy.ups: {exc}")

    reserve = float(d.get("phone_reserve", DEFAULT_PHONE_RESERVE))
    if not 0 <= reserve <= 1:
        errors.append("energy.phone_reserve must lie in [0, 1]")
    soc = float(d.get("phone_soc", 1.0))
    if not 0 <= soc <= 1:
        errors.append("energy.phone_soc must lie in [0, 1]")
    return EnergyConfig(
        pv=pv,
        grid=grid,
        ups=ups,
        phone_reserve=reserve,
        admin_reserve_hours=float(d.get("admin_reserve_hours", 1.0)),
        grid_charging=bool(d.get("grid_charging", True)),
        pv_intensity=float(d.get("pv_intensity", PV_LIFECYCLE_INTENSITY)),
        phone_soc=soc,
    )


def _ambient(value, dt: float, errors: list[str]) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    if isinstance(value, list) and value:
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError):
            errors.append("ambient list must hold numbers")
            return (25.0,)
    if isinstance(value, dict):
        mean = float(value.get("mean", 25.0))
        amp = float(value.get("amplitude", 0.0))
        spd = max(1, int(round(86400.0 / dt)))
        # Coolest at 04:00, warmest at 16:00.
        return tuple(mean - amp * math.cos(2 * math.pi * (k * dt / 3600.0 - 4.0) / 24.0) for k in range(spd))
    errors.append(f"ambient must be a number, a list or {{mean, amplitude}}, got {value!r}")
    return (25.0,)


FORMAT_HELP = """\
Scenario file (YAML). Every section is optional except nodes.

  name: text                 duration: steps (>= 1)      dt: seconds per step (> 0)
  seed: int                  random_failures: bool       repair_steps: int | null (never)
  nodes:                     list of {id, profile|kind, <NodeSpec fields>}; add
                             {prefix, count} to stamp out prefix01..prefixNN
  inventory: nodes.csv       node inventory CSV (columns as in `ssdc simulate --help`)
  reserve_nodes:             nodes that exist but only enter via a NodeJoin injection
  services: default | catalog.yaml | list of service mappings
  levels: {service: level}   nominal level per service (default: its top level)
  energy:
    pv: {file: trace.csv, scale, repeat} | {synthetic: {peak, days, seed, min_clearness}}
    grid: {max_power, intensity, available: [[start_s, end_s], ...], daily: [[start_h, end_h], ...]}
                             (no window lists means always connected)
    ups: {capacity, soc, charge_efficiency, discharge_efficiency, max_rate}
    phone_reserve: fraction    admin_reserve_hours: h    phone_soc: fraction
    grid_charging: bool        pv_intensity: gCO2e/kWh
  policies: list of {mode: intermittent|quota|supply,
                     resource: energy|communication|memory|computation,
                     window, cap, schedule: [[start_s, end_s]], period}
  injections: list of {step, kind, subject, magnitude}
              kinds: NodeFailure NodeJoin NodeLeave ThermalTrip SwitchFailure
                     SwitchRecovery EnergyShortfall(subject grid: outage)
                     EnergySurplus(subject grid: reconnect)
  viability: {p_crit, k_max}
  controller: {heartbeat_timeout, horizon, consolidation_period, raise_margin}
  network: {switches: [ids], mesh: full | [[a, b], ...]}
  ambient: degC | [per-step list] | {mean, amplitude}
  thermal_hysteresis: degC below threshold before a tripped node restarts
  baseline: {nodes: [...]}   new-equipment fleet for the avoided-impact comparison
"""


def describe_format() -> str:
    return FORMAT_HELP
