"""Degradable services, their task instances, and resource quota policies.

A service exposes a ladder of feature levels (0 = off). Each level carries a
per-replica resource demand; stripping a service means walking down the ladder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import yaml

from ssdc.errors import DomainError, RangeError

DATA_DIR = Path(__file__).parent / "data"


class Resources(NamedTuple):
    cpu_mips: float = 0.0
    gpu_mflops: float = 0.0
    mem: float = 0.0
    bandwidth: float = 0.0

    def __add__(self, other):  # type: ignore[override]
        return Resources(*(a + b for a, b in zip(self, other)))

    def __sub__(self, other):
        return Resources(*(a - b for a, b in zip(self, other)))

    def scale(self, k: float) -> "Resources":
        return Resources(*(a * k for a in self))

    def fits(self, capacity: "Resources", eps: float = 1e-9) -> bool:
        return all(a <= b + eps for a, b in zip(self, capacity))

    def __le__(self, other):  # componentwise
        return all(a <= b for a, b in zip(self, other))

    def __ge__(self, other):
        return all(a >= b for a, b in zip(self, other))


ZERO = Resources()
INFINITE = Resources(math.inf, math.inf, math.inf, math.inf)


class ServiceKind(str, Enum):
    MTA = "mta"
    FILE_HOSTING = "file_hosting"
    WIKI = "wiki"
    AI_INFERENCE = "ai_inference"
    HPC_BATCH = "hpc_batch"


@dataclass(frozen=True)
class FeatureLevel:
    level: int
    demand: Resources = ZERO
    power_overhead: float = 0.0
    utility: float = 0.0


@dataclass(frozen=True)
class Service:
    id: str
    kind: ServiceKind
    priority: int
    levels: tuple[FeatureLevel, ...]
    min_level: int = 0
    smartphone_eligible: bool = True
    replication: int = 1
    interruptible: bool = False
    requires_gpu: bool = False
    peer_eligible: bool = False

    def __post_init__(self):
        problems = validate_service(self)
        if problems:
            raise DomainError(f"service {self.id}: " + "; ".join(problems))

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def level(self, k: int) -> FeatureLevel:
        if not 0 <= k <= self.max_level:
            raise RangeError(f"service {self.id}: level {k} outside [0, {self.max_level}]")
        return self.levels[k]

    def task_ids(self) -> list[str]:
        return [f"{self.id}#{r}" for r in range(self.replication)]


def validate_service(s: Service) -> list[str]:
    problems = []
    if not s.levels:
        return ["needs at least level 0"]
    if any(lv.level != i for i, lv in enumerate(s.levels)):
        problems.append("levels must be numbered 0..n in order")
    first = s.levels[0]
    if first.demand != ZERO or first.utility != 0 or first.power_overhead != 0:
        problems.append("level 0 must have zero demand, overhead and utility")
    for a, b in zip(s.levels, s.levels[1:]):
        if not (b.demand >= a.demand and b.utility >= a.utility and b.power_overhead >= a.power_overhead):
            problems.append(f"level {b.level} must not demand or yield less than level {a.level}")
    if not 0 <= s.min_level <= len(s.levels) - 1:
        problems.append("min_level must be a valid level index")
    if s.replication < 1:
        problems.append("replication must be >= 1")
    if s.kind is ServiceKind.HPC_BATCH and not s.interruptible:
        problems.append("HPC batch services must be interruptible")
    return problems


class LevelDemand(NamedTuple):
    resources: Resources
    power_overhead: float


def demand_at(service: Service, level: int) -> LevelDemand:
    """Aggregate demand of all replicas of ``service`` at ``level``."""
    lv = service.level(level)
    r = service.replication
    return LevelDemand(lv.demand.scale(r), lv.power_overhead * r)


def strip_to_budget(service: Service, budget: Resources) -> int:
    """Highest level whose aggregate demand fits ``budget`` componentwise (0 if none)."""
    if any(b < 0 for b in budget):
        raise DomainError("budget must be >= 0 componentwise")
    best = 0
    for k in range(service.max_level + 1):
        if demand_at(service, k).resources.fits(budget):
            best = k
    return best


@dataclass
class TaskInstance:
    id: str
    service_id: str
    level: int
    node: str | None = None
    requires_gpu: bool = False


def make_tasks(services: Iterable[Service], levels: dict[str, int]) -> list[TaskInstance]:
    out = []
    for s in services:
        for tid in s.task_ids():
            out.append(TaskInstance(tid, s.id, levels.get(s.id, s.max_level), None, s.requires_gpu))
    return out


# --- quotas -----------------------------------------------------------------------


class QuotaMode(str, Enum):
    INTERMITTENT = "intermittent"
    QUOTA = "quota"
    SUPPLY = "supply"


class QuotaResource(str, Enum):
    ENERGY = "energy"
    COMMUNICATION = "communication"
    MEMORY = "memory"
    COMPUTATION = "computation"


class Verdict(str, Enum):
    ALLOW = "allow"
    THROTTLE = "throttle"
    DENY = "deny"


class QuotaDecision(NamedTuple):
    verdict: Verdict
    factor: float = 1.0

    @classmethod
    def allow(cls):
        return cls(Verdict.ALLOW, 1.0)

    @classmethod
    def deny(cls):
        return cls(Verdict.DENY, 0.0)


@dataclass(frozen=True)
class QuotaPolicy:
    """One point of {intermittent, quota, supply} x {energy, communication, memory, computation}.

    Intermittent: ``schedule`` holds (start_s, end_s) allowed windows, repeated
    every ``period`` seconds when that is set. Quota: at most ``cap`` units
    (resource-units x s; Wh for energy) within a sliding ``window`` of seconds.
    Supply: throttled by the instantaneous supply/demand ratio.
    """

    mode: QuotaMode
    resource: QuotaResource
    window: float = 3600.0
    cap: float = math.inf
    schedule: tuple[tuple[float, float], ...] = ()
    period: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", QuotaMode(self.mode))
        object.__setattr__(self, "resource", QuotaResource(self.resource))
        if self.cap < 0:
            raise DomainError("quota cap must be >= 0")
        if self.window <= 0:
            raise DomainError("quota window must be > 0")


def enforce_quota(
    policy: QuotaPolicy,
    history: Sequence[tuple[float, float]],
    t: float,
    request: float = 0.0,
    supply: float | None = None,
    demand: float | None = None,
) -> QuotaDecision:
    """Decide whether usage of ``policy.resource`` may proceed at time ``t``.

    ``history`` is a list of ``(time, amount)`` usage records. ``request`` is the
    amount about to be consumed; a Quota policy throttles it to the headroom
    left in the window so the cap is never exceeded.
    """
    if policy.mode is QuotaMode.INTERMITTENT:
        tt = t % policy.period if policy.period else t
        if any(a <= tt < b for a, b in policy.schedule):
            return QuotaDecision.allow()
        return QuotaDecision.deny()
    if policy.mode is QuotaMode.QUOTA:
        used = math.fsum(amount for when, amount in history if t - policy.window < when <= t)
        left = policy.cap - used
        if left <= 0:
            return QuotaDecision.deny()
        if request > left:
            return QuotaDecision(Verdict.THROTTLE, left / request)
        return QuotaDecision.allow()
    # supply
    if supply is None or demand is None:
        raise DomainError("supply policies need both supply and demand")
    if demand <= 0 or supply >= demand:
        return QuotaDecision.allow()
    if supply <= 0:
        return QuotaDecision.deny()
    return QuotaDecision(Verdict.THROTTLE, supply / demand)


# --- catalog files ----------------------------------------------------------------


def service_from_dict(d: dict) -> Service:
    levels = []
    for i, lv in enumerate(d["levels"]):
        dem = lv.get("demand", {})
        levels.append(
            FeatureLevel(
                level=i,
                demand=Resources(
                    float(dem.get("cpu_mips", 0)),
                    float(dem.get("gpu_mflops", 0)),
                    float(dem.get("mem", 0)),
                    float(dem.get("bandwidth", 0)),
                ),
                power_overhead=float(lv.get("power_overhead", 0.0)),
                utility=float(lv.get("utility", i)),
            )
        )
    return Service(
        id=str(d["id"]),
        kind=ServiceKind(d["kind"]),
        priority=int(d["priority"]),
        levels=tuple(levels),
        min_level=int(d.get("min_level", 0)),
        smartphone_eligible=bool(d.get("smartphone_eligible", True)),
        replication=int(d.get("replication", 1)),
        interruptible=bool(d.get("interruptible", False)),
        requires_gpu=bool(d.get("requires_gpu", False)),
        peer_eligible=bool(d.get("peer_eligible", False)),
    )


def service_to_dict(s: Service) -> dict:
    return {
        "id": s.id,
        "kind": s.kind.value,
        "priority": s.priority,
        "min_level": s.min_level,
        "smartphone_eligible": s.smartphone_eligible,
        "replication": s.replication,
        "interruptible": s.interruptible,
        "requires_gpu": s.requires_gpu,
        "peer_eligible": s.peer_eligible,
        "levels": [
            {"demand": dict(lv.demand._asdict()), "power_overhead": lv.power_overhead, "utility": lv.utility}
            for lv in s.levels
        ],
    }


def load_catalog(path: str | Path | None = None) -> list[Service]:
    """Service catalog YAML (``services:`` list); the shipped default when ``path`` is None."""
    path = Path(path) if path else DATA_DIR / "services.yaml"
    with path.open() as fh:
        return [service_from_dict(d) for d in yaml.safe_load(fh)["services"]]


def default_catalog() -> list[Service]:
    return load_catalog()
