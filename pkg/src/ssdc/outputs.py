"""Run directories: what ``simulate`` writes and ``impact`` reads back.

Every file is plain text and a pure function of the run, so two runs of
the same scenario and seed produce byte-identical directories.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from ssdc.devices import INVENTORY_COLUMNS, spec_from_dict, spec_to_row
from ssdc.energy import EnergyLedger
from ssdc.errors import ScenarioError
from ssdc.impact import ImpactReport, Intensities, NodeUsage, RunRecord, record_from_result

EVENTS_FILE = "events.jsonl"
LEDGER_FILE = "ledger.csv"
AVAILABILITY_FILE = "availability.csv"
NODES_FILE = "nodes.csv"
RUN_FILE = "run.json"
SUMMARY_FILE = "summary.txt"
IMPACT_FILE = "impact.csv"
IMPACT_SUMMARY_FILE = "impact_summary.txt"

RUN_FILES = (EVENTS_FILE, LEDGER_FILE, AVAILABILITY_FILE, NODES_FILE, RUN_FILE, SUMMARY_FILE)


def events_jsonl(events: list[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)


def _csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _spec_dict(spec) -> dict:
    return {k: v for k, v in zip(INVENTORY_COLUMNS, spec_to_row(spec)) if v != ""}


def write_run(result, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = result.scenario
    (out / EVENTS_FILE).write_text(events_jsonl(result.events))
    result.ledger.write_csv(out / LEDGER_FILE)
    _csv(out / AVAILABILITY_FILE,
         ["service", "priority", "min_level", "availability", "served_fraction", "mean_level"],
         [[s.id, s.priority, s.min_level, result.availability[s.id], result.served_fraction[s.id],
           result.mean_level[s.id]] for s in sorted(sc.services, key=lambda s: s.id)])
    _csv(out / NODES_FILE, ["node", "kind", "energy_wh", "mi", "mflop", "up_steps"],
         [[spec.id, spec.kind.value, result.accounts[spec.id].energy_wh, result.accounts[spec.id].mi,
           result.accounts[spec.id].mflop, result.accounts[spec.id].up_steps]
          for spec in sorted(sc.all_nodes, key=lambda s: s.id)])
    rec = record_from_result(result)
    meta = {
        "scenario": sc.name,
        "seed": sc.seed,
        "dt": sc.dt,
        "duration": sc.duration,
        "duration_s": result.duration_s,
        "breach_at_end": result.breach_at_end,
        "time_in_viability": result.time_in_viability,
        "intensities": {"grid": rec.intensities.grid, "pv": rec.intensities.pv},
        "nodes": [_spec_dict(s) for s in sorted(sc.all_nodes, key=lambda s: s.id)],
        "baseline": [_spec_dict(s) for s in sc.baseline],
    }
    (out / RUN_FILE).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    (out / SUMMARY_FILE).write_text(summary_text(result))
    return [out / f for f in RUN_FILES]


def summary_text(result) -> str:
    sc = result.scenario
    lines = [
        f"scenario {sc.name}  seed {sc.seed}  steps {sc.duration}  dt {sc.dt:g} s",
        f"outcome {'VIABILITY BREACH' if result.breach_at_end else 'viable'} at end;"
        f" time in viability {result.time_in_viability:.4f}",
        "",
        "service   priority  availability  mean_level",
    ]
    for s in sorted(sc.services, key=lambda s: (s.priority, s.id)):
        lines.append(f"{s.id:<9} {s.priority:>8}  {result.availability[s.id]:>12.4f}  {result.mean_level[s.id]:>10.3f}")
    led = result.ledger
    lines += [
        "",
        f"energy consumed {led.total('consumed'):.3f} Wh  unmet {led.total('unmet'):.3f} Wh"
        f"  shed {led.total('shed'):.3f} Wh",
        f"ledger max residual {led.max_residual():.3e}",
        f"nodes initial {result.initial_nodes} final {result.final_nodes}"
        f"  joins {result.joins} leaves {result.leaves}",
        f"breaches at steps {result.breach_steps or 'none'}",
    ]
    return "\n".join(lines) + "\n"


def read_run(run_dir: str | Path) -> RunRecord:
    """Rebuild the accounting inputs from a run directory.

    Raises ScenarioError naming every missing or unreadable file.
    """
    d = Path(run_dir)
    missing = [f for f in (RUN_FILE, LEDGER_FILE, NODES_FILE, EVENTS_FILE) if not (d / f).is_file()]
    if missing:
        raise ScenarioError([f"{d}: missing {f}" for f in missing])
    try:
        meta = json.loads((d / RUN_FILE).read_text())
        ledger = EnergyLedger.read_csv(d / LEDGER_FILE)
        with (d / NODES_FILE).open(newline="") as fh:
            usage = {r["node"]: r for r in csv.DictReader(fh)}
        specs = [spec_from_dict(n, profiles={}) for n in meta["nodes"]]
        baseline = tuple(spec_from_dict(n, profiles={}) for n in meta["baseline"])
        nodes = [NodeUsage(s, float(usage[s.id]["energy_wh"]), float(usage[s.id]["mi"]), float(usage[s.id]["mflop"]))
                 for s in specs]
        intens = Intensities(**meta["intensities"])
        return RunRecord(float(meta["duration_s"]), nodes, ledger, intens, baseline)
    except (KeyError, ValueError, TypeError) as exc:
        raise ScenarioError([f"{d}: unreadable run directory ({exc!r})"]) from None


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_impact(report: ImpactReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.node, _fmt(r.embodied_allocated), _fmt(r.use_phase), _fmt(r.energy_wh), _fmt(r.mi),
             _fmt(r.mflop), _fmt(r.gi), _fmt(r.cci)] for r in report.rows]
    rows.append(["total", _fmt(report.embodied_allocated), _fmt(report.use_phase),
                 _fmt(sum(r.energy_wh for r in report.rows)), _fmt(report.mi), _fmt(report.mflop),
                 _fmt(report.gi), _fmt(report.cci)])
    _csv(out / IMPACT_FILE,
         ["node", "embodied_kgco2e", "use_phase_kgco2e", "energy_wh", "mi", "mflop", "gi", "cci_g_per_gi"], rows)
    (out / IMPACT_SUMMARY_FILE).write_text(impact_summary(report))
    return [out / IMPACT_FILE, out / IMPACT_SUMMARY_FILE]


def impact_summary(report: ImpactReport) -> str:
    def g(x, unit=""):
        return "n/a" if x is None else f"{x:.6g}{unit}"

    lines = [
        f"allocation {report.policy.value}  second life {report.second_life_years:.4g} years",
        f"embodied allocated {g(report.embodied_allocated, ' kgCO2e')}",
        f"use phase {g(report.use_phase, ' kgCO2e')}",
        f"computation {g(report.gi, ' GI')}",
        f"CCI {g(report.cci, ' gCO2e/GI')}",
    ]
    b = report.baseline
    if b is not None:
        lines += [
            "",
            f"baseline fleet embodied (avoided) {g(b.embodied_total, ' kgCO2e')}",
            f"baseline embodied over the run {g(b.embodied_prorated, ' kgCO2e')}",
            f"baseline use phase {g(b.use_phase, ' kgCO2e')}  utilization {b.utilization:.4f}",
            f"baseline CCI {g(report.baseline_cci, ' gCO2e/GI')}",
            f"improvement factor {g(report.improvement_factor)}",
        ]
    cats = [f"  {k} {g(v)}" for k, v in report.categories.items() if v is not None]
    if cats:
        lines += ["", "impact categories (populated only)"] + cats
    return "\n".join(lines) + "\n"
