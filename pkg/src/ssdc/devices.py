"""Salvaged nodes: static capabilities, dynamic state, and their physics.

Power follows a linear idle-to-peak model. Temperature is a lumped
single-node heat balance. Failures are memoryless (exponential MTBF).
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import yaml

from ssdc.errors import CapabilityError, DomainError

DATA_DIR = Path(__file__).parent / "data"


class NodeKind(str, Enum):
    DESKTOP = "desktop"
    LAPTOP = "laptop"
    SERVER = "server"
    SMARTPHONE = "smartphone"
    SINGLE_BOARD = "single_board"


class Resource(str, Enum):
    CPU = "cpu"
    GPU = "gpu"


class Status(str, Enum):
    UP = "up"
    FAILED = "failed"
    THERMAL = "thermal"
    ENERGY_SHED = "energy_shed"
    RETIRED = "retired"


@dataclass(frozen=True)
class GpuSpec:
    mflops: float
    mem: float
    # Board power at full load; efficiency falls back to the node's peak when absent.
    power: float | None = None


@dataclass(frozen=True)
class BatterySpec:
    capacity: float  # Wh
    max_charge_rate: float  # W
    max_discharge_rate: float  # W
    charge_efficiency: float = 0.95
    discharge_efficiency: float = 0.95


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: NodeKind
    cpu_mips: float
    cpu_mflops: float
    mem: float
    bandwidth: float
    nic_count: int
    idle_power: float
    peak_power: float
    thermal_threshold: float
    thermal_mass: float
    dissipation: float
    embodied_carbon: float
    first_life_years: float
    mtbf: float
    gpu: GpuSpec | None = None
    battery: BatterySpec | None = None

    def __post_init__(self):
        problems = validate_spec(self)
        if problems:
            raise DomainError(f"node {self.id}: " + "; ".join(problems))

    @property
    def has_gpu(self) -> bool:
        return self.gpu is not None


def validate_spec(spec: NodeSpec) -> list[str]:
    problems = []
    if not spec.peak_power >= spec.idle_power >= 0:
        problems.append("need peak_power >= idle_power >= 0")
    if not spec.mtbf > 0:
        problems.append("mtbf must be > 0")
    if spec.nic_count < 0:
        problems.append("nic_count must be >= 0")
    if spec.thermal_mass <= 0:
        problems.append("thermal_mass must be > 0")
    if spec.dissipation < 0:
        problems.append("dissipation must be >= 0")
    for name in ("cpu_mips", "cpu_mflops", "mem", "bandwidth", "embodied_carbon", "first_life_years"):
        if getattr(spec, name) < 0:
            problems.append(f"{name} must be >= 0")
    if spec.kind is NodeKind.SMARTPHONE:
        if spec.battery is None:
            problems.append("smartphones must have a battery")
        if spec.nic_count < 1:
            problems.append("smartphones need the USB-Ethernet link (nic_count >= 1)")
    return problems


@dataclass
class NodeState:
    status: Status = Status.UP
    temperature: float = 25.0
    battery_soc: float | None = None
    cpu_util: float = 0.0
    gpu_util: float = 0.0
    mem_util: float = 0.0
    bw_util: float = 0.0
    assigned: list[str] = field(default_factory=list)

    @property
    def is_up(self) -> bool:
        return self.status is Status.UP

    @property
    def utilization(self) -> float:
        """Utilization that drives the power model."""
        return max(self.cpu_util, self.gpu_util)


class Efficiency(NamedTuple):
    mips_per_joule: float
    mflops_per_joule: float


def efficiency(spec: NodeSpec, resource: Resource = Resource.CPU) -> Efficiency:
    """Compute per joule at full load: MI/J and MFLOP/J (same numbers as per-watt rates).

    The GPU variant reports no instruction throughput, only MFLOP/J against
    the board power.
    """
    resource = Resource(resource)
    if resource is Resource.GPU:
        if spec.gpu is None:
            raise CapabilityError(f"node {spec.id} has no GPU")
        power = spec.gpu.power if spec.gpu.power is not None else spec.peak_power
        if power <= 0:
            raise DomainError(f"node {spec.id}: GPU power must be > 0")
        return Efficiency(0.0, spec.gpu.mflops / power)
    if spec.peak_power <= 0:
        raise DomainError(f"node {spec.id}: peak_power must be > 0")
    return Efficiency(spec.cpu_mips / spec.peak_power, spec.cpu_mflops / spec.peak_power)


def power_draw(spec: NodeSpec, utilization: float) -> float:
    if not 0.0 <= utilization <= 1.0:
        raise DomainError(f"utilization {utilization} outside [0, 1]")
    return spec.idle_power + utilization * (spec.peak_power - spec.idle_power)


def node_power(spec: NodeSpec, state: NodeState, overhead: float = 0.0) -> float:
    """Instantaneous draw of a node in its current state; zero when it is not up."""
    if not state.is_up:
        return 0.0
    return power_draw(spec, min(1.0, state.utilization)) + overhead


class ThermalResult(NamedTuple):
    temperature: float
    shutdown: bool


def step_thermal(state: NodeState, spec: NodeSpec, drawn_power: float, ambient: float, dt: float) -> ThermalResult:
    """Advance the heat balance by ``dt`` seconds (explicit Euler).

    Trips the node to ``Status.THERMAL`` when the new temperature exceeds the
    threshold; ``shutdown`` is True only on that transition.
    """
    if dt <= 0:
        raise DomainError("dt must be > 0")
    t = state.temperature
    t_new = t + dt * (drawn_power - spec.dissipation * (t - ambient)) / spec.thermal_mass
    state.temperature = t_new
    tripped = False
    if t_new > spec.thermal_threshold and state.status is Status.UP:
        state.status = Status.THERMAL
        state.assigned.clear()
        tripped = True
    return ThermalResult(t_new, tripped)


def stable_substeps(spec: NodeSpec, dt: float, max_ratio: float = 0.5) -> int:
    """Number of Euler sub-steps keeping ``dt * dissipation / thermal_mass`` below ``max_ratio``."""
    ratio = dt * spec.dissipation / spec.thermal_mass
    return max(1, math.ceil(ratio / max_ratio))


def failure_probability(spec: NodeSpec, dt: float) -> float:
    if dt <= 0:
        raise DomainError("dt must be > 0")
    if math.isinf(spec.mtbf):
        return 0.0
    return 1.0 - math.exp(-dt / (3600.0 * spec.mtbf))


def sample_failure(spec: NodeSpec, dt: float, rng: random.Random) -> bool:
    """Draw exactly one uniform from ``rng`` and report whether the node fails this step."""
    return rng.random() < failure_probability(spec, dt)


# --- profiles and inventory files -------------------------------------------------

# Column order of the node inventory CSV. Empty gpu_* / battery_* cells mean "absent".
INVENTORY_COLUMNS = [
    "id", "kind", "cpu_mips", "cpu_mflops", "mem", "bandwidth", "nic_count",
    "idle_power", "peak_power", "thermal_threshold", "thermal_mass", "dissipation",
    "embodied_carbon", "first_life_years", "mtbf",
    "gpu_mflops", "gpu_mem", "gpu_power",
    "battery_capacity", "battery_max_charge_rate", "battery_max_discharge_rate",
]


def load_profiles(path: str | Path | None = None) -> dict[str, dict]:
    """Default per-kind parameter sets (``data/profiles.yaml``), keyed by profile name."""
    path = Path(path) if path else DATA_DIR / "profiles.yaml"
    with path.open() as fh:
        return yaml.safe_load(fh)["profiles"]


def spec_from_dict(d: dict, profiles: dict[str, dict] | None = None) -> NodeSpec:
    """Build a NodeSpec from a mapping, filling gaps from ``d['profile']`` (or the kind)."""
    d = dict(d)
    profile_name = d.pop("profile", None)
    base: dict = {}
    if profile_name or "kind" in d:
        profiles = profiles if profiles is not None else load_profiles()
        key = profile_name or d["kind"]
        if key in profiles:
            base = dict(profiles[key])
        elif profile_name:
            raise DomainError(f"unknown node profile {profile_name!r}")
    merged = {**base, **d}
    gpu = merged.pop("gpu", None)
    battery = merged.pop("battery", None)
    for key in ("gpu_mflops", "gpu_mem", "gpu_power"):
        if merged.get(key) not in (None, ""):
            gpu = dict(gpu or {})
            gpu[key[4:]] = float(merged[key])
        merged.pop(key, None)
    for key in ("battery_capacity", "battery_max_charge_rate", "battery_max_discharge_rate"):
        if merged.get(key) not in (None, ""):
            battery = dict(battery or {})
            battery[key[8:]] = float(merged[key])
        merged.pop(key, None)
    try:
        return NodeSpec(
            id=str(merged["id"]),
            kind=NodeKind(merged["kind"]),
            cpu_mips=float(merged["cpu_mips"]),
            cpu_mflops=float(merged["cpu_mflops"]),
            mem=float(merged["mem"]),
            bandwidth=float(merged["bandwidth"]),
            nic_count=int(merged["nic_count"]),
            idle_power=float(merged["idle_power"]),
            peak_power=float(merged["peak_power"]),
            thermal_threshold=float(merged["thermal_threshold"]),
            thermal_mass=float(merged["thermal_mass"]),
            dissipation=float(merged["dissipation"]),
            embodied_carbon=float(merged["embodied_carbon"]),
            first_life_years=float(merged["first_life_years"]),
            mtbf=float(merged["mtbf"]),
            gpu=GpuSpec(**gpu) if gpu else None,
            battery=BatterySpec(**battery) if battery else None,
        )
    except KeyError as exc:
        raise DomainError(f"node {merged.get('id', '?')}: missing field {exc.args[0]}") from None


def spec_to_row(spec: NodeSpec) -> list:
    g, b = spec.gpu, spec.battery
    return [
        spec.id, spec.kind.value, spec.cpu_mips, spec.cpu_mflops, spec.mem, spec.bandwidth,
        spec.nic_count, spec.idle_power, spec.peak_power, spec.thermal_threshold,
        spec.thermal_mass, spec.dissipation, spec.embodied_carbon, spec.first_life_years,
        spec.mtbf,
        g.mflops if g else "", g.mem if g else "", (g.power if g and g.power is not None else ""),
        b.capacity if b else "", b.max_charge_rate if b else "", b.max_discharge_rate if b else "",
    ]


def load_inventory(path: str | Path, profiles: dict[str, dict] | None = None) -> list[NodeSpec]:
    """Read a node inventory CSV (header row with ``INVENTORY_COLUMNS`` names).

    Columns may be omitted when a ``profile`` column names a default profile.
    """
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("id")]
    out = []
    for row in rows:
        clean = {k: v for k, v in row.items() if k and v not in (None, "")}
        out.append(spec_from_dict(clean, profiles))
    return out


def write_inventory(specs: list[NodeSpec], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INVENTORY_COLUMNS)
        for s in specs:
            w.writerow(spec_to_row(s))


def default_node(kind: NodeKind | str, node_id: str, **overrides) -> NodeSpec:
    """Node with the shipped default profile for ``kind``."""
    kind = NodeKind(kind)
    return spec_from_dict({"id": node_id, "kind": kind.value, **overrides})


def initial_state(spec: NodeSpec, temperature: float = 25.0, soc_fraction: float = 1.0) -> NodeState:
    soc = spec.battery.capacity * soc_fraction if spec.battery else None
    return NodeState(temperature=temperature, battery_soc=soc)


def scaled(spec: NodeSpec, factor: float) -> NodeSpec:
    """Same node with compute rates and powers multiplied by ``factor`` (used in tests)."""
    return replace(
        spec,
        cpu_mips=spec.cpu_mips * factor,
        cpu_mflops=spec.cpu_mflops * factor,
        idle_power=spec.idle_power * factor,
        peak_power=spec.peak_power * factor,
    )
