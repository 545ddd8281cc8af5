"""Energy supply for the cluster: PV, grid, UPS and the pooled smartphone batteries.

Power is in W, energy in Wh, time in s. Loads are served in merit order
PV -> grid -> UPS -> phone batteries. Surplus charges the UPS first, then
the phones; whatever PV is left over is curtailed and logged as shed.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

from ssdc.devices import NodeSpec, NodeState, Status
from ssdc.errors import DomainError, HistoryError, RangeError

DAY = 86400.0
GRID_INTENSITY_FR = 28.0  # gCO2e/kWh, French mix
PV_LIFECYCLE_INTENSITY = 40.0  # gCO2e/kWh, typical rooftop PV lifecycle (assumption)
DEFAULT_PHONE_RESERVE = 0.2
UNMET_FLOOR_WH = 1e-9  # Wh; below this a shortfall is float round-off


@dataclass
class PvTrace:
    start_time: float
    dt: float
    watts: list[float]

    def __post_init__(self):
        if self.dt <= 0:
            raise DomainError("PV trace dt must be > 0")
        self.watts = [float(w) for w in self.watts]
        if any(w < 0 for w in self.watts):
            raise DomainError("PV trace values must be >= 0")

    def __len__(self):
        return len(self.watts)

    @property
    def end_time(self) -> float:
        return self.start_time + len(self.watts) * self.dt

    @property
    def steps_per_day(self) -> int:
        return int(round(DAY / self.dt))

    def index(self, t: float) -> int:
        k = math.floor((t - self.start_time) / self.dt + 1e-9)
        if not 0 <= k < len(self.watts):
            raise RangeError(f"t={t} outside PV trace [{self.start_time}, {self.end_time})")
        return k

    def at(self, t: float) -> float:
        return self.watts[self.index(t)]


@dataclass
class GridSource:
    max_power: float
    carbon_intensity: float = GRID_INTENSITY_FR
    # (start_s, end_s) intervals when the grid is connected; None means always.
    available: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if self.max_power < 0 or self.carbon_intensity < 0:
            raise DomainError("grid max_power and carbon_intensity must be >= 0")

    def is_on(self, t: float) -> bool:
        if self.available is None:
            return True
        return any(a <= t < b for a, b in self.available)

    def power_at(self, t: float) -> float:
        return self.max_power if self.is_on(t) else 0.0


@dataclass
class UpsBank:
    capacity: float
    soc: float
    charge_efficiency: float = 0.9
    discharge_efficiency: float = 0.9
    max_rate: float = 500.0

    def __post_init__(self):
        if not 0 <= self.soc <= self.capacity:
            raise DomainError("UPS soc must lie in [0, capacity]")
        for eff in (self.charge_efficiency, self.discharge_efficiency):
            if not 0 < eff <= 1:
                raise DomainError("UPS efficiencies must lie in (0, 1]")

    def deliverable(self, dt: float) -> float:
        return min(self.max_rate * dt / 3600.0, self.soc * self.discharge_efficiency)

    def discharge(self, wanted: float, dt: float) -> float:
        take = min(wanted, self.deliverable(dt))
        if take <= 0:
            return 0.0
        self.soc = max(0.0, self.soc - take / self.discharge_efficiency)
        return take

    def accept(self, offered: float, dt: float) -> float:
        """Absorb up to ``offered`` Wh of input; returns the input actually taken."""
        room = (self.capacity - self.soc) / self.charge_efficiency
        take = max(0.0, min(offered, self.max_rate * dt / 3600.0, room))
        self.soc = min(self.capacity, self.soc + take * self.charge_efficiency)
        return take


@dataclass
class PhonePool:
    """Smartphone batteries usable as a shared buffer (vehicle-to-grid style).

    Each phone keeps ``max(reserve_fraction * capacity, admin_reserve[id])`` Wh
    for its own administration work.
    """

    phones: list[tuple[NodeSpec, NodeState]] = field(default_factory=list)
    reserve_fraction: float = DEFAULT_PHONE_RESERVE
    admin_reserve: dict[str, float] = field(default_factory=dict)

    def members(self) -> list[tuple[NodeSpec, NodeState]]:
        out = [
            (s, st)
            for s, st in self.phones
            if s.battery is not None
            and st.battery_soc is not None
            and st.status in (Status.UP, Status.ENERGY_SHED)
        ]
        return sorted(out, key=lambda p: p[0].id)

    def reserve(self, spec: NodeSpec) -> float:
        cap = spec.battery.capacity
        return min(cap, max(self.reserve_fraction * cap, self.admin_reserve.get(spec.id, 0.0)))

    def headroom(self, spec: NodeSpec, state: NodeState, dt: float) -> float:
        b = spec.battery
        above = max(0.0, state.battery_soc - self.reserve(spec))
        return min(b.max_discharge_rate * dt / 3600.0, above * b.discharge_efficiency)

    def deliverable(self, dt: float) -> float:
        return sum(self.headroom(s, st, dt) for s, st in self.members())

    def total_soc(self) -> float:
        return sum(st.battery_soc or 0.0 for _, st in self.phones)


def _water_fill(amount: float, caps: Sequence[float]) -> list[float]:
    """Max-min fair split of ``amount`` across bins of the given capacities."""
    shares = [0.0] * len(caps)
    remaining = amount
    order = sorted(range(len(caps)), key=lambda i: caps[i])
    left = len(order)
    for i in order:
        if remaining <= 0:
            break
        give = min(caps[i], remaining / left)
        shares[i] = give
        remaining -= give
        left -= 1
    return shares


def phone_pool_to_system(pool: PhonePool, demand: float, dt: float) -> float:
    """Discharge phones above their reserve to cover ``demand`` Wh, spread evenly."""
    members = pool.members()
    if demand <= 0 or not members:
        return 0.0
    caps = [pool.headroom(s, st, dt) for s, st in members]
    shares = _water_fill(demand, caps)
    delivered = 0.0
    for (spec, state), give in zip(members, shares):
        if give <= 0:
            continue
        state.battery_soc = max(0.0, state.battery_soc - give / spec.battery.discharge_efficiency)
        delivered += give
    return delivered


def _phones_accept(pool: PhonePool, offered: float, dt: float) -> float:
    members = pool.members()
    if offered <= 0 or not members:
        return 0.0
    caps = []
    for spec, state in members:
        b = spec.battery
        room = (b.capacity - state.battery_soc) / b.charge_efficiency
        caps.append(max(0.0, min(b.max_charge_rate * dt / 3600.0, room)))
    shares = _water_fill(offered, caps)
    taken = 0.0
    for (spec, state), give in zip(members, shares):
        if give <= 0:
            continue
        b = spec.battery
        state.battery_soc = min(b.capacity, state.battery_soc + give * b.charge_efficiency)
        taken += give
    return taken


class SupplyBreakdown(NamedTuple):
    pv: float
    grid: float
    ups: float
    phones: float

    @property
    def total(self) -> float:
        return self.pv + self.grid + self.ups + self.phones


class Fulfillment(NamedTuple):
    pv: float
    grid: float
    ups: float
    phones: float
    unmet: float

    @property
    def fulfilled(self) -> float:
        return self.pv + self.grid + self.ups + self.phones


class ChargeResult(NamedTuple):
    taken: float  # input energy absorbed (Wh)
    stored: float  # state-of-charge increase (Wh)
    shed: float  # input left over (Wh)


def available_power(
    t: float,
    pv: PvTrace | None,
    grid: GridSource | None,
    ups: UpsBank | None,
    phone_pool: PhonePool | None,
    dt: float = 60.0,
) -> SupplyBreakdown:
    """What each source could deliver at ``t`` (W, averaged over ``dt`` for storage)."""
    pv_w = pv.at(t) if pv is not None else 0.0
    grid_w = grid.power_at(t) if grid is not None else 0.0
    ups_w = ups.deliverable(dt) * 3600.0 / dt if ups is not None else 0.0
    phones_w = phone_pool.deliverable(dt) * 3600.0 / dt if phone_pool is not None else 0.0
    return SupplyBreakdown(pv_w, grid_w, ups_w, phones_w)


def _soc(ups: UpsBank | None, pool: PhonePool | None) -> float:
    return (ups.soc if ups else 0.0) + (pool.total_soc() if pool else 0.0)


def draw_power(
    demand: float,
    dt: float,
    pv_w: float,
    grid_w: float,
    ups: UpsBank | None = None,
    phone_pool: PhonePool | None = None,
) -> Fulfillment:
    """Serve ``demand`` W for ``dt`` s in merit order; shortfall comes back as ``unmet``."""
    if demand < 0:
        raise DomainError("demand must be >= 0")
    need = demand * dt / 3600.0
    from_pv = min(need, pv_w * dt / 3600.0)
    need -= from_pv
    from_grid = min(need, grid_w * dt / 3600.0)
    need -= from_grid
    from_ups = ups.discharge(need, dt) if ups is not None and need > 0 else 0.0
    need -= from_ups
    from_phones = phone_pool_to_system(phone_pool, need, dt) if phone_pool is not None and need > 0 else 0.0
    need -= from_phones
    # Round-off from the storage efficiency division is not a real shortfall.
    unmet = need if need > UNMET_FLOOR_WH else 0.0
    return Fulfillment(from_pv, from_grid, from_ups, from_phones, unmet)


def charge_storage(surplus: float, dt: float, ups: UpsBank | None, phone_pool: PhonePool | None) -> ChargeResult:
    """Push ``surplus`` W for ``dt`` s into the UPS, then the phones."""
    if surplus < 0:
        raise DomainError("surplus must be >= 0")
    offered = surplus * dt / 3600.0
    before = _soc(ups, phone_pool)
    taken = ups.accept(offered, dt) if ups is not None else 0.0
    if phone_pool is not None:
        taken += _phones_accept(phone_pool, offered - taken, dt)
    stored = _soc(ups, phone_pool) - before
    return ChargeResult(taken, stored, offered - taken)


def forecast_pv(trace: PvTrace, now: int, horizon: int) -> list[float]:
    """Persistence forecast for steps ``now+1 .. now+horizon``: same time yesterday.

    ``now`` is a step index; steps ``0..now`` count as observed.
    """
    spd = trace.steps_per_day
    if now + 1 < spd or now >= len(trace):
        raise HistoryError(f"need a full day ({spd} steps) of history at step {now}")
    out = []
    for k in range(1, horizon + 1):
        j = now + k - spd
        while j > now:
            j -= spd
        out.append(trace.watts[j])
    return out


# --- ledger ---------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    time: float
    demand: float
    pv_available: float
    pv_to_load: float
    grid_to_load: float
    ups_to_load: float
    phones_to_load: float
    charge_from_pv: float
    charge_from_grid: float
    stored: float
    discharged: float
    losses: float
    shed: float
    unmet: float
    ups_soc: float
    phone_soc: float

    @property
    def consumed(self) -> float:
        return self.pv_to_load + self.grid_to_load + self.ups_to_load + self.phones_to_load

    @property
    def supplied_pv(self) -> float:
        return self.pv_available

    @property
    def supplied_grid(self) -> float:
        return self.grid_to_load + self.charge_from_grid

    @property
    def battery_delta(self) -> float:
        return self.stored - self.discharged

    def residual(self) -> float:
        """Relative energy-balance error of the step."""
        supplied = self.supplied_pv + self.supplied_grid
        used = self.consumed + self.shed + self.losses + self.battery_delta
        scale = max(supplied, used, self.stored, self.discharged, 1e-12)
        return abs(supplied - used) / scale


LEDGER_COLUMNS = [f.name for f in fields(StepRecord)] + ["consumed"]


@dataclass
class EnergyLedger:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def total(self, name: str) -> float:
        return math.fsum(getattr(r, name) for r in self.records)

    def max_residual(self) -> float:
        return max((r.residual() for r in self.records), default=0.0)

    def cumulative_residual(self) -> float:
        supplied = self.total("supplied_pv") + self.total("supplied_grid")
        used = self.total("consumed") + self.total("shed") + self.total("losses") + self.total("battery_delta")
        return abs(supplied - used) / max(supplied, used, 1e-12)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for r in self.records:
                w.writerow([getattr(r, c) if c != "consumed" else r.consumed for c in LEDGER_COLUMNS])

    @classmethod
    def read_csv(cls, path: str | Path) -> "EnergyLedger":
        recs = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                kw = {f.name: (int(row[f.name]) if f.name == "step" else float(row[f.name])) for f in fields(StepRecord)}
                recs.append(StepRecord(**kw))
        return cls(recs)


@dataclass
class EnergySystem:
    pv: PvTrace | None = None
    grid: GridSource | None = None
    ups: UpsBank | None = None
    phone_pool: PhonePool | None = None
    allow_grid_charging: bool = True
    pv_intensity: float = PV_LIFECYCLE_INTENSITY
    ledger: EnergyLedger = field(default_factory=EnergyLedger)
    # Scripted outages override the grid schedule while False.
    grid_connected: bool = True

    def available(self, t: float, dt: float) -> SupplyBreakdown:
        b = available_power(t, self.pv, self.grid, self.ups, self.phone_pool, dt)
        return b._replace(grid=self.grid_at(t))

    def pv_at(self, t: float) -> float:
        return self.pv.at(t) if self.pv is not None else 0.0

    def grid_at(self, t: float) -> float:
        if self.grid is None or not self.grid_connected:
            return 0.0
        return self.grid.power_at(t)

    def storage_deliverable(self, dt: float) -> float:
        """Wh that storage could hand out over ``dt`` (rate and reserve limited)."""
        e = self.ups.deliverable(dt) if self.ups else 0.0
        if self.phone_pool:
            e += self.phone_pool.deliverable(dt)
        return e

    def storage_energy(self) -> float:
        """Wh extractable from storage ignoring rate limits (reserve respected)."""
        e = self.ups.soc * self.ups.discharge_efficiency if self.ups else 0.0
        if self.phone_pool:
            for s, st in self.phone_pool.members():
                e += max(0.0, st.battery_soc - self.phone_pool.reserve(s)) * s.battery.discharge_efficiency
        return e

    def step(self, demand: float, dt: float, t: float, step: int) -> StepRecord:
        """Serve the load, charge storage from what is left, append one ledger row."""
        pv_w = self.pv_at(t)
        grid_w = self.grid_at(t)
        before = _soc(self.ups, self.phone_pool)
        got = draw_power(demand, dt, pv_w, grid_w, self.ups, self.phone_pool)
        discharged = before - _soc(self.ups, self.phone_pool)
        pv_left = max(0.0, pv_w - got.pv * 3600.0 / dt)
        pv_charge = charge_storage(pv_left, dt, self.ups, self.phone_pool)
        grid_taken = 0.0
        grid_stored = 0.0
        if self.allow_grid_charging and grid_w > 0:
            grid_left = max(0.0, grid_w - got.grid * 3600.0 / dt)
            gc = charge_storage(grid_left, dt, self.ups, self.phone_pool)
            grid_taken, grid_stored = gc.taken, gc.stored
        stored = pv_charge.stored + grid_stored
        delivered = got.ups + got.phones
        taken = pv_charge.taken + grid_taken
        rec = StepRecord(
            step=step,
            time=t,
            demand=demand * dt / 3600.0,
            pv_available=pv_w * dt / 3600.0,
            pv_to_load=got.pv,
            grid_to_load=got.grid,
            ups_to_load=got.ups,
            phones_to_load=got.phones,
            charge_from_pv=pv_charge.taken,
            charge_from_grid=grid_taken,
            stored=stored,
            discharged=discharged,
            losses=(taken - stored) + (discharged - delivered),
            shed=pv_charge.shed,
            unmet=got.unmet,
            ups_soc=self.ups.soc if self.ups else 0.0,
            phone_soc=self.phone_pool.total_soc() if self.phone_pool else 0.0,
        )
        self.ledger.append(rec)
        return rec


# --- trace files ------------------------------------------------------------------


def load_pv_trace(path: str | Path, dt: float, start_time: float = 0.0) -> PvTrace:
    """Read a ``step,watts`` CSV."""
    watts = []
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                watts.append(float(row[1]))
            except ValueError:
                continue  # header
    return PvTrace(start_time, dt, watts)


def write_pv_trace(trace: PvTrace, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "watts"])
        for k, v in enumerate(trace.watts):
            w.writerow([k, v])


def synthetic_pv_trace(
    days: int,
    dt: float,
    peak: float,
    seed: int = 0,
    min_clearness: float = 0.3,
    sunrise_h: float = 6.0,
    sunset_h: float = 20.0,
) -> PvTrace:
    """Half-sine daylight profile scaled by one random clearness factor per day."""
    rng = random.Random(seed)
    spd = int(round(DAY / dt))
    watts = []
    for _ in range(days):
        clear = rng.uniform(min_clearness, 1.0)
        for k in range(spd):
            h = k * dt / 3600.0
            if sunrise_h <= h <= sunset_h:
                x = (h - sunrise_h) / (sunset_h - sunrise_h)
                watts.append(peak * clear * math.sin(math.pi * x))
            else:
                watts.append(0.0)
    return PvTrace(0.0, dt, watts)
