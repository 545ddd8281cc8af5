"""Command-line entry point: ``ssdc trajectory | simulate | impact``.

Exit codes: 0 success, 2 input error, 3 viability breach at the end of a run.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from ssdc import outputs
from ssdc.devices import load_inventory, spec_from_dict
from ssdc.errors import ScenarioError, SsdcError
from ssdc.impact import AllocationPolicy, DEFAULT_POLICY, compare_baseline
from ssdc.scenario import CONFIG_ENV, describe_format, load_scenario
from ssdc.sim import run
from ssdc.trajectory import DEFAULT_BASE_VALUE, DEFAULT_BASE_YEAR, DEFAULT_PATHWAY, load_pathway, trajectory_table, write_table

EXIT_OK, EXIT_INPUT, EXIT_BREACH = 0, 2, 3

OUTPUT_HELP = f"""\
Run directory (simulate --out):
  {outputs.EVENTS_FILE}        one JSON object per line, keys sorted: step, time, kind, subject,
                      provenance, plus kind-specific fields
  {outputs.LEDGER_FILE}          one row per step, energy in Wh per step
  {outputs.AVAILABILITY_FILE}    service, priority, min_level, availability, served_fraction, mean_level
  {outputs.NODES_FILE}           node, kind, energy_wh, mi, mflop, up_steps
  {outputs.RUN_FILE}            node specs, baseline fleet, carbon intensities, outcome
  {outputs.SUMMARY_FILE}         human-readable digest
impact writes {outputs.IMPACT_FILE} (per node plus a total row) and {outputs.IMPACT_SUMMARY_FILE}.
Baseline file: YAML {{nodes: [...]}} in scenario node syntax, or an inventory CSV.
Scenario names are looked up as given, then in ${CONFIG_ENV}, then among the shipped ones.
"""


class _Formatter(argparse.RawDescriptionHelpFormatter, argparse.ArgumentDefaultsHelpFormatter):
    pass


def _err(msg: str) -> None:
    print(f"ssdc: {msg}", file=sys.stderr)


# --- trajectory ----------------------------------------------------------------------------


def cmd_trajectory(args) -> int:
    if not -1.0 <= args.growth <= 1.0:
        _err("--growth must lie in [-1, 1]")
        return EXIT_INPUT
    try:
        anchors = load_pathway(args.pathway)
        rows = trajectory_table(anchors, args.growth, args.base_year, args.base_value, args.end_year)
    except FileNotFoundError:
        _err(f"pathway file not found: {args.pathway}")
        return EXIT_INPUT
    except SsdcError as exc:
        _err(str(exc))
        return EXIT_INPUT
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_table(rows, fh)
    else:
        write_table(rows, sys.stdout)
    if args.gnuplot_script:
        if not args.out:
            _err("--gnuplot-script needs --out so the script has a CSV to read")
            return EXIT_INPUT
        png = Path(args.out).with_suffix(".png")
        Path(args.gnuplot_script).write_text(_gnuplot("trajectory", args.out, png))
    if args.plot:
        code = _plot(lambda p: p.plot_trajectory(rows, args.plot, args.growth))
        if code:
            return code
    return EXIT_OK


# --- simulate --------------------------------------------------------------------------------


def _simulate_one(scenario_path: str, seed: int | None, out_dir: str) -> tuple[str, bool, str]:
    overrides = {"seed": seed} if seed is not None else None
    sc = load_scenario(scenario_path, overrides)
    result = run(sc)
    outputs.write_run(result, out_dir)
    return out_dir, result.breach_at_end, outputs.summary_text(result)


def _sweep_seeds(spec: str) -> list[int]:
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        return list(range(int(lo), int(hi)))
    return [int(s) for s in spec.split(",") if s.strip()]


def cmd_simulate(args) -> int:
    try:
        sc = load_scenario(args.scenario, {"seed": args.seed} if args.seed is not None else None)
    except ScenarioError as exc:
        _err(f"invalid scenario {args.scenario}:")
        for e in exc.errors:
            print(f"  {e}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out or Path("runs") / sc.name)
    if args.sweep:
        try:
            seeds = _sweep_seeds(args.sweep)
        except ValueError:
            _err(f"--sweep wants a comma list or lo:hi range, got {args.sweep!r}")
            return EXIT_INPUT
        dirs = [str(out / f"seed-{s}") for s in seeds]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate_one, [args.scenario] * len(seeds), seeds, dirs))
        breached = [d for d, b, _ in results if b]
        for d, b, _ in results:
            print(f"{d}\t{'breach' if b else 'viable'}")
    else:
        result = run(sc)
        outputs.write_run(result, out)
        print(outputs.summary_text(result), end="")
        breached = [str(out)] if result.breach_at_end else []
        dirs = [str(out)]
    if args.gnuplot_script:
        Path(args.gnuplot_script).write_text(
            "".join(_gnuplot("ledger", Path(d) / outputs.LEDGER_FILE, Path(d) / "energy.png") for d in dirs))
    if args.plot:
        from_dirs = lambda p: [p.plot_run(d) for d in dirs]  # noqa: E731
        code = _plot(from_dirs)
        if code:
            return code
    if breached:
        _err("viability breach persisting at end of run: " + ", ".join(breached))
        return EXIT_BREACH
    return EXIT_OK


# --- impact ------------------------------------------------------------------------------------


def _load_baseline(path: str):
    p = Path(path)
    if not p.is_file():
        raise ScenarioError([f"baseline file not found: {path}"])
    if p.suffix.lower() == ".csv":
        return load_inventory(p)
    raw = yaml.safe_load(p.read_text()) or {}
    entries = raw.get("nodes", raw.get("baseline", {}).get("nodes") if isinstance(raw.get("baseline"), dict) else None)
    if not isinstance(entries, list):
        raise ScenarioError([f"{path}: expected a 'nodes' list"])
    return [spec_from_dict(e) for e in entries]


def cmd_impact(args) -> int:
    try:
        policy = AllocationPolicy.parse(args.policy)
        record = outputs.read_run(args.run_dir)
        fleet = _load_baseline(args.baseline) if args.baseline else None
        report = compare_baseline(record, fleet, policy, args.second_life_years)
    except ScenarioError as exc:
        for e in exc.errors:
            _err(e)
        return EXIT_INPUT
    except SsdcError as exc:
        _err(str(exc))
        return EXIT_INPUT
    outputs.write_impact(report, args.out or args.run_dir)
    print(outputs.impact_summary(report), end="")
    return EXIT_OK


# --- shared ---------------------------------------------------------------------------------------


def _gnuplot(kind: str, csv_path, png_path) -> str:
    from ssdc.plotting import gnuplot_script

    return gnuplot_script(kind, csv_path, png_path)


def _plot(draw) -> int:
    from ssdc import plotting

    try:
        draw(plotting)
    except plotting.PlottingUnavailable as exc:
        _err(str(exc))
        return EXIT_INPUT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssdc",
        description="Small data center built from reused devices: emissions trajectories, "
                    "autonomic control simulation, carbon accounting.",
        epilog=OUTPUT_HELP,
        formatter_class=_Formatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("trajectory", help="world vs ICT emissions table (CSV)", formatter_class=_Formatter,
                       epilog="Pathway file: CSV 'year,emissions_Mt', '#' comments and a header allowed.\n"
                              "Output columns: year, world_Mt, ict_Mt, share_pct.")
    t.add_argument("--pathway", default=str(DEFAULT_PATHWAY), help="anchor CSV")
    t.add_argument("--growth", type=float, default=0.06, help="annual ICT growth, in [-1, 1]")
    t.add_argument("--base-year", type=int, default=DEFAULT_BASE_YEAR)
    t.add_argument("--base-value", type=float, default=DEFAULT_BASE_VALUE, help="ICT MtCO2e in the base year")
    t.add_argument("--end-year", type=int, default=None, help="last year (default: pathway end)")
    t.add_argument("--out", help="CSV path (default: standard output)")
    t.add_argument("--plot", metavar="PNG", help="also draw the table (needs matplotlib)")
    t.add_argument("--gnuplot-script", metavar="PATH", help="write a gnuplot script for the --out CSV")
    t.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("simulate", help="run a scenario", formatter_class=_Formatter,
                       epilog=describe_format() + "\n" + OUTPUT_HELP)
    s.add_argument("scenario", help="scenario YAML path or shipped name (nominal, blackout, ...)")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.add_argument("--out", help="run directory (default: runs/<scenario name>)")
    s.add_argument("--sweep", metavar="SEEDS", help="seeds '1,2,5' or range '0:10'; one sub-directory each")
    s.add_argument("--jobs", type=int, default=None, help="worker processes for --sweep")
    s.add_argument("--plot", action="store_true", help="write energy.png and availability.png (needs matplotlib)")
    s.add_argument("--gnuplot-script", metavar="PATH", help="write a gnuplot script for the ledger CSV")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("impact", help="carbon report for a run directory", formatter_class=_Formatter,
                       epilog=OUTPUT_HELP)
    i.add_argument("run_dir")
    i.add_argument("--policy", default=DEFAULT_POLICY.value, help="|".join(p.value for p in AllocationPolicy))
    i.add_argument("--baseline", help="new-equipment fleet (default: the scenario's baseline section)")
    i.add_argument("--second-life-years", type=float, default=None, help="default: the run's duration")
    i.add_argument("--out", help="report directory (default: the run directory)")
    i.set_defaults(func=cmd_impact)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    try:
        return args.func(args)
    except OSError as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
