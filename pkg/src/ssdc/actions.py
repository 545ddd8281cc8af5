"""Actuator commands a control cycle can issue.

``provenance`` records why an action exists (the perturbation that caused it,
or ``self-optimization`` / ``self-configuration``); it does not take part in
equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class StartTask:
    task_id: str
    node_id: str
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class StopTask:
    task_id: str
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class MigrateTask:
    task_id: str
    source: str
    target: str
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class SetServiceLevel:
    service_id: str
    level: int
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class PowerNodeOn:
    node_id: str
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class PowerNodeOff:
    node_id: str
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class ChargeStorage:
    allow_grid: bool = True
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class EnterAmorphousMode:
    provenance: str = field(default="", compare=False)


@dataclass(frozen=True)
class ExitAmorphousMode:
    provenance: str = field(default="", compare=False)


Action = (
    StartTask | StopTask | MigrateTask | SetServiceLevel | PowerNodeOn | PowerNodeOff
    | ChargeStorage | EnterAmorphousMode | ExitAmorphousMode
)

ACTION_KIND = {
    StartTask: "StartTask",
    StopTask: "StopTask",
    MigrateTask: "MigrateTask",
    SetServiceLevel: "SetServiceLevel",
    PowerNodeOn: "PowerNodeOn",
    PowerNodeOff: "PowerNodeOff",
    ChargeStorage: "ChargeStorage",
    EnterAmorphousMode: "EnterAmorphousMode",
    ExitAmorphousMode: "ExitAmorphousMode",
}


def subject(action) -> str:
    for attr in ("task_id", "service_id", "node_id"):
        if hasattr(action, attr):
            return getattr(action, attr)
    return "cluster"
