"""Carbon accounting over finished runs.

Computation is measured in GI (giga-instructions). CPU work is counted in
MI and accelerator work in MFLOP; one floating-point operation counts as
one instruction when the two are summed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ssdc.devices import NodeSpec
from ssdc.energy import GRID_INTENSITY_FR, PV_LIFECYCLE_INTENSITY, EnergyLedger
from ssdc.errors import DomainError

YEAR_S = 365.25 * 86400.0


class AllocationPolicy(enum.Enum):
    FULL_EMBODIED = "FullEmbodied"
    SECOND_LIFE_ONLY = "SecondLifeOnly"
    PRO_RATA_BY_YEARS = "ProRataByYears"

    @classmethod
    def parse(cls, name: str) -> "AllocationPolicy":
        for p in cls:
            if name in (p.value, p.name):
                return p
        raise DomainError(f"unknown allocation policy {name!r}; choose from {', '.join(p.value for p in cls)}")


DEFAULT_POLICY = AllocationPolicy.PRO_RATA_BY_YEARS


def cci(embodied_allocated: float, use_phase: float, computation: float) -> float:
    """Grams CO2e per GI, from kilograms of emissions."""
    if not computation > 0:
        raise DomainError("computation must be > 0 GI")
    if embodied_allocated < 0 or use_phase < 0:
        raise DomainError("emissions must be >= 0")
    return 1000.0 * (embodied_allocated + use_phase) / computation


def allocate_embodied(spec: NodeSpec, policy: AllocationPolicy, second_life_years: float) -> float:
    """Share of ``spec.embodied_carbon`` (kgCO2e) borne by the reuse period."""
    if second_life_years < 0:
        raise DomainError("second_life_years must be >= 0")
    e = spec.embodied_carbon
    if policy is AllocationPolicy.FULL_EMBODIED:
        return e
    if policy is AllocationPolicy.SECOND_LIFE_ONLY:
        return 0.0
    total = spec.first_life_years + second_life_years
    return e * second_life_years / total if total > 0 else 0.0


@dataclass(frozen=True)
class Intensities:
    """Source carbon intensities in gCO2e/kWh."""

    grid: float = GRID_INTENSITY_FR
    pv: float = PV_LIFECYCLE_INTENSITY


def drawn_energy(ledger: EnergyLedger) -> dict[str, float]:
    """Wh taken from each primary source, whether used at once or stored.

    Storage discharge is not a source: the energy was counted when charged.
    Curtailed PV is never drawn.
    """
    return {
        "pv": ledger.total("pv_to_load") + ledger.total("charge_from_pv"),
        "grid": ledger.total("grid_to_load") + ledger.total("charge_from_grid"),
    }


def use_phase_emissions(ledger: EnergyLedger, intensities: Intensities | Mapping[str, float] = Intensities()) -> float:
    """kgCO2e for the energy drawn over the run."""
    if isinstance(intensities, Intensities):
        intensities = {"pv": intensities.pv, "grid": intensities.grid}
    drawn = drawn_energy(ledger)
    return math.fsum(drawn[src] / 1000.0 * intensities.get(src, 0.0) for src in drawn) / 1000.0


# --- run summaries -------------------------------------------------------------------


@dataclass(frozen=True)
class NodeUsage:
    spec: NodeSpec
    energy_wh: float
    mi: float
    mflop: float

    @property
    def gi(self) -> float:
        return (self.mi + self.mflop) / 1000.0


@dataclass
class RunRecord:
    """What carbon accounting needs from a run; built from a result or a run directory."""

    duration_s: float
    nodes: list[NodeUsage]
    ledger: EnergyLedger
    intensities: Intensities = Intensities()
    baseline: tuple[NodeSpec, ...] = ()

    @property
    def years(self) -> float:
        return self.duration_s / YEAR_S


def record_from_result(result) -> RunRecord:
    sc = result.scenario
    grid = sc.energy.grid
    intens = Intensities(
        grid=grid.carbon_intensity if grid is not None else GRID_INTENSITY_FR,
        pv=sc.energy.pv_intensity,
    )
    nodes = []
    for spec in sorted(sc.all_nodes, key=lambda s: s.id):
        acc = result.accounts.get(spec.id)
        if acc is None:
            nodes.append(NodeUsage(spec, 0.0, 0.0, 0.0))
        else:
            nodes.append(NodeUsage(spec, acc.energy_wh, acc.mi, acc.mflop))
    return RunRecord(result.duration_s, nodes, result.ledger, intens, tuple(sc.baseline))


# --- report ------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeImpact:
    node: str
    embodied_allocated: float
    use_phase: float
    energy_wh: float
    mi: float
    mflop: float

    @property
    def gi(self) -> float:
        return (self.mi + self.mflop) / 1000.0

    @property
    def cci(self) -> float | None:
        return cci(self.embodied_allocated, self.use_phase, self.gi) if self.gi > 0 else None


@dataclass(frozen=True)
class BaselineImpact:
    embodied_total: float  # kgCO2e of the whole new fleet, i.e. what reuse avoided
    embodied_prorated: float  # share of that fleet's lifetime spent on the run
    use_phase: float
    energy_wh: float
    utilization: float

    @property
    def total(self) -> float:
        return self.embodied_prorated + self.use_phase


@dataclass
class ImpactReport:
    policy: AllocationPolicy
    second_life_years: float
    rows: list[NodeImpact]
    baseline: BaselineImpact | None = None
    categories: dict[str, float | None] = field(default_factory=dict)

    @property
    def embodied_allocated(self) -> float:
        return math.fsum(r.embodied_allocated for r in self.rows)

    @property
    def use_phase(self) -> float:
        return math.fsum(r.use_phase for r in self.rows)

    @property
    def mi(self) -> float:
        return math.fsum(r.mi for r in self.rows)

    @property
    def mflop(self) -> float:
        return math.fsum(r.mflop for r in self.rows)

    @property
    def gi(self) -> float:
        return (self.mi + self.mflop) / 1000.0

    @property
    def cci(self) -> float | None:
        return cci(self.embodied_allocated, self.use_phase, self.gi) if self.gi > 0 else None

    @property
    def avoided_embodied(self) -> float:
        return self.baseline.embodied_total if self.baseline else 0.0

    @property
    def baseline_cci(self) -> float | None:
        if self.baseline is None or self.gi <= 0:
            return None
        return cci(self.baseline.embodied_prorated, self.baseline.use_phase, self.gi)

    @property
    def improvement_factor(self) -> float | None:
        """How many times less carbon per GI the reused fleet emits than the new one."""
        own, base = self.cci, self.baseline_cci
        if own is None or base is None:
            return None
        return base / own if own > 0 else math.inf


def baseline_impact(
    fleet: Sequence[NodeSpec], duration_s: float, mi: float, mflop: float, grid_intensity: float = GRID_INTENSITY_FR,
) -> BaselineImpact:
    """New equipment doing the same work over the same period, on grid power.

    Each device's embodied carbon is spread over its service life
    (``first_life_years``). The fleet runs the whole period, sharing the load
    evenly: CPU work stretches over its MIPS, accelerator work over GPU
    MFLOP/s, or over CPU MFLOP/s when the fleet has no GPU.
    """
    if not fleet:
        return BaselineImpact(0.0, 0.0, 0.0, 0.0, 0.0)
    years = duration_s / YEAR_S
    embodied_total = math.fsum(s.embodied_carbon for s in fleet)
    prorated = math.fsum(
        s.embodied_carbon * (min(1.0, years / s.first_life_years) if s.first_life_years > 0 else 1.0) for s in fleet
    )
    cpu_cap = math.fsum(s.cpu_mips for s in fleet) * duration_s
    gpu_cap = math.fsum(s.gpu.mflops for s in fleet if s.gpu) * duration_s
    flop_cap = math.fsum(s.cpu_mflops for s in fleet) * duration_s
    u_cpu = mi / cpu_cap if cpu_cap > 0 else 0.0
    u_gpu = mflop / gpu_cap if gpu_cap > 0 else 0.0
    if gpu_cap <= 0 and mflop > 0:
        u_cpu += mflop / flop_cap if flop_cap > 0 else math.inf
    if u_cpu > 1.0 + 1e-9 or u_gpu > 1.0 + 1e-9:
        raise DomainError(f"baseline fleet too small for the delivered work (utilization {max(u_cpu, u_gpu):.3f})")
    u_cpu, u_gpu = min(1.0, u_cpu), min(1.0, u_gpu)
    watts = math.fsum(
        s.idle_power + u_cpu * (s.peak_power - s.idle_power) + (u_gpu * s.gpu.power if s.gpu else 0.0) for s in fleet
    )
    energy_wh = watts * duration_s / 3600.0
    use = energy_wh / 1000.0 * grid_intensity / 1000.0
    return BaselineImpact(embodied_total, prorated, use, energy_wh, max(u_cpu, u_gpu))


def compare_baseline(
    run,
    baseline_fleet: Sequence[NodeSpec] | None = None,
    policy: AllocationPolicy = DEFAULT_POLICY,
    second_life_years: float | None = None,
) -> ImpactReport:
    """Impact of the reused fleet for ``run`` next to buying ``baseline_fleet`` new.

    ``run`` is a RunResult or a RunRecord. The run counts as the whole second
    life unless ``second_life_years`` says otherwise. Use-phase emissions are
    split across nodes by the energy each drew.
    """
    rec = run if isinstance(run, RunRecord) else record_from_result(run)
    fleet = rec.baseline if baseline_fleet is None else tuple(baseline_fleet)
    second = rec.years if second_life_years is None else second_life_years
    use_total = use_phase_emissions(rec.ledger, rec.intensities)
    energy_total = math.fsum(n.energy_wh for n in rec.nodes)
    rows = []
    for n in rec.nodes:
        share = n.energy_wh / energy_total if energy_total > 0 else 0.0
        rows.append(NodeImpact(n.spec.id, allocate_embodied(n.spec, policy, second), use_total * share,
                               n.energy_wh, n.mi, n.mflop))
    if energy_total <= 0 and use_total > 0:
        # Energy went only into storage; nobody ran, so nobody owns it.
        rows.append(NodeImpact("(storage)", 0.0, use_total, 0.0, 0.0, 0.0))
    report = ImpactReport(policy, second, rows)
    if fleet:
        report.baseline = baseline_impact(fleet, rec.duration_s, report.mi, report.mflop, rec.intensities.grid)
    report.categories = category_impacts(report)
    return report


# --- multi-category extension -----------------------------------------------------------

# Midpoint impact categories. Only climate change has node-level data; the
# rest stay None until factors exist. Values convert kgCO2e to the category unit.
IMPACT_CATEGORIES: dict[str, float | None] = {
    "climate_change": 1.0,
    "ozone_depletion": None,
    "ionising_radiation": None,
    "fine_particulate_matter": None,
    "photochemical_ozone_human": None,
    "photochemical_ozone_ecosystems": None,
    "terrestrial_acidification": None,
    "freshwater_eutrophication": None,
    "marine_eutrophication": None,
    "terrestrial_ecotoxicity": None,
    "freshwater_ecotoxicity": None,
    "marine_ecotoxicity": None,
    "human_carcinogenic_toxicity": None,
    "human_noncarcinogenic_toxicity": None,
    "land_use": None,
    "mineral_resource_scarcity": None,
    "fossil_resource_scarcity": None,
    "water_consumption": None,
}


def category_impacts(report: ImpactReport, factors: Mapping[str, float | None] = IMPACT_CATEGORIES) -> dict[str, float | None]:
    kg = report.embodied_allocated + report.use_phase
    return {name: (kg * f if f is not None else None) for name, f in factors.items()}
