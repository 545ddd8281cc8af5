import csv
import importlib.util
import io

import pytest

from ssdc.cli import EXIT_BREACH, EXIT_INPUT, EXIT_OK, main
from ssdc.outputs import IMPACT_FILE, IMPACT_SUMMARY_FILE, RUN_FILES

HAS_MPL = importlib.util.find_spec("matplotlib") is not None


def table(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_flat_growth_gives_constant_ict(capsys):
    assert main(["trajectory", "--growth", "0.0"]) == EXIT_OK
    rows = table(capsys.readouterr().out)
    assert list(rows[0]) == ["year", "world_Mt", "ict_Mt", "share_pct"]
    assert len({r["ict_Mt"] for r in rows}) == 1


def test_six_percent_share_strictly_rises(capsys):
    assert main(["trajectory", "--growth", "0.06"]) == EXIT_OK
    shares = [float(r["share_pct"]) for r in table(capsys.readouterr().out)]
    finite = [x for x in shares if x != float("inf")]
    assert all(b > a for a, b in zip(finite, finite[1:]))
    assert all(x == float("inf") for x in shares[len(finite):])


def test_missing_pathway_exits_2(tmp_path, capsys):
    assert main(["trajectory", "--pathway", str(tmp_path / "none.csv")]) == EXIT_INPUT
    assert "not found" in capsys.readouterr().err


def test_growth_out_of_range():
    assert main(["trajectory", "--growth", "1.5"]) == EXIT_INPUT


def test_bad_flag_exits_2():
    assert main(["trajectory", "--no-such-flag"]) == EXIT_INPUT


def test_trajectory_gnuplot_script(tmp_path):
    out, gp = tmp_path / "t.csv", tmp_path / "t.gp"
    assert main(["trajectory", "--out", str(out), "--gnuplot-script", str(gp)]) == EXIT_OK
    script = gp.read_text()
    assert str(out) in script and "plot" in script


def test_nominal_simulation(tmp_path, capsys):
    assert main(["simulate", "nominal", "--out", str(tmp_path)]) == EXIT_OK
    assert "availability" in capsys.readouterr().out
    for f in RUN_FILES:
        assert (tmp_path / f).is_file()
    rows = table((tmp_path / "availability.csv").read_text())
    assert {float(r["availability"]) for r in rows} == {1.0}


def test_same_seed_twice_identical_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "amorphous", "--seed", "3", "--out", str(a)]) == main(
        ["simulate", "amorphous", "--seed", "3", "--out", str(b)])
    for f in RUN_FILES:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_blackout_exits_3(tmp_path, capsys):
    assert main(["simulate", "blackout", "--out", str(tmp_path)]) == EXIT_BREACH
    assert "breach" in capsys.readouterr().err


def test_invalid_scenario_lists_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("duration: 0\nnodes: [{id: a, profile: desktop}, {id: a, profile: desktop}]\n")
    assert main(["simulate", str(bad)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "duration" in err and "duplicate" in err


def test_sweep_writes_one_directory_per_seed(tmp_path, capsys):
    assert main(["simulate", "nominal", "--sweep", "1,2", "--jobs", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "seed-1" / "events.jsonl").is_file()
    assert (tmp_path / "seed-2" / "events.jsonl").is_file()


def test_bad_sweep_spec(tmp_path):
    assert main(["simulate", "nominal", "--sweep", "x:y", "--out", str(tmp_path)]) == EXIT_INPUT


def test_impact_policies(tmp_path, capsys):
    run_dir = tmp_path / "run"
    main(["simulate", "nominal", "--out", str(run_dir)])
    assert main(["impact", str(run_dir), "--policy", "SecondLifeOnly", "--out", str(tmp_path / "free")]) == EXIT_OK
    rows = table((tmp_path / "free" / IMPACT_FILE).read_text())
    assert all(float(r["embodied_kgco2e"]) == 0.0 for r in rows)
    assert main(["impact", str(run_dir), "--policy", "FullEmbodied", "--out", str(tmp_path / "full")]) == EXIT_OK
    full = {r["node"]: r for r in table((tmp_path / "full" / IMPACT_FILE).read_text())}
    free = {r["node"]: r for r in rows}
    assert float(full["total"]["cci_g_per_gi"]) / float(free["total"]["cci_g_per_gi"]) > 1


def test_impact_is_idempotent(tmp_path):
    main(["simulate", "nominal", "--out", str(tmp_path)])
    main(["impact", str(tmp_path)])
    first = [(tmp_path / f).read_bytes() for f in (IMPACT_FILE, IMPACT_SUMMARY_FILE)]
    main(["impact", str(tmp_path)])
    assert [(tmp_path / f).read_bytes() for f in (IMPACT_FILE, IMPACT_SUMMARY_FILE)] == first


def test_impact_missing_inputs(tmp_path, capsys):
    assert main(["impact", str(tmp_path)]) == EXIT_INPUT
    assert "missing" in capsys.readouterr().err


def test_impact_with_baseline_file(tmp_path, capsys):
    main(["simulate", "nominal", "--out", str(tmp_path)])
    base = tmp_path / "base.yaml"
    base.write_text("nodes:\n" + "".join(f"  - {{id: new{i}, profile: server}}\n" for i in range(4)))
    assert main(["impact", str(tmp_path), "--baseline", str(base)]) == EXIT_OK
    assert "improvement factor" in capsys.readouterr().out


def test_help_documents_formats(capsys):
    with pytest.raises(SystemExit):
        from ssdc.cli import build_parser
        build_parser().parse_args(["simulate", "--help"])
    out = capsys.readouterr().out
    assert "events.jsonl" in out and "injections" in out


@pytest.mark.skipif(not HAS_MPL, reason="matplotlib not installed")
def test_plots_written(tmp_path):
    png = tmp_path / "traj.png"
    assert main(["trajectory", "--plot", str(png), "--out", str(tmp_path / "t.csv")]) == EXIT_OK
    assert png.stat().st_size > 0
    run_dir = tmp_path / "run"
    assert main(["simulate", "nominal", "--out", str(run_dir), "--plot",
                 "--gnuplot-script", str(tmp_path / "l.gp")]) == EXIT_OK
    assert (run_dir / "energy.png").is_file() and (run_dir / "availability.png").is_file()
    assert "ledger.csv" in (tmp_path / "l.gp").read_text()
