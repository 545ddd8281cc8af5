import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from ssdc.devices import default_node
from ssdc.energy import EnergyLedger, StepRecord
from ssdc.errors import DomainError
from ssdc.impact import (
    IMPACT_CATEGORIES,
    YEAR_S,
    AllocationPolicy,
    Intensities,
    NodeUsage,
    RunRecord,
    allocate_embodied,
    baseline_impact,
    cci,
    compare_baseline,
    use_phase_emissions,
)
from ssdc.outputs import read_run, write_run
from ssdc.scenario import load_scenario
from ssdc.sim import run

POLICIES = list(AllocationPolicy)


def rec(step, pv=0.0, grid=0.0, cpv=0.0, cgrid=0.0, ups=0.0):
    return StepRecord(step, 60.0 * step, pv + grid + ups, pv + cpv, pv, grid, ups, 0.0, cpv, cgrid,
                      0.0, ups, 0.0, 0.0, 0.0, 0.0, 0.0)


def test_cci_examples():
    assert cci(0, 0, 5) == 0
    assert cci(1, 1, 1000) == pytest.approx(2.0)
    assert cci(3, 1, 200) == pytest.approx(2 * cci(3, 1, 400))
    with pytest.raises(DomainError):
        cci(1, 1, 0)


def test_allocation_examples():
    spec = replace(default_node("desktop", "d"), embodied_carbon=100.0, first_life_years=6.0)
    assert allocate_embodied(spec, AllocationPolicy.SECOND_LIFE_ONLY, 3) == 0
    assert allocate_embodied(spec, AllocationPolicy.PRO_RATA_BY_YEARS, 3) == pytest.approx(33.333, abs=1e-3)
    assert allocate_embodied(spec, AllocationPolicy.FULL_EMBODIED, 3) == 100.0
    with pytest.raises(DomainError):
        allocate_embodied(spec, AllocationPolicy.FULL_EMBODIED, -1)


def test_policy_names_parse():
    assert AllocationPolicy.parse("SecondLifeOnly") is AllocationPolicy.SECOND_LIFE_ONLY
    assert AllocationPolicy.parse("PRO_RATA_BY_YEARS") is AllocationPolicy.PRO_RATA_BY_YEARS
    with pytest.raises(DomainError):
        AllocationPolicy.parse("Free")


def test_use_phase_examples():
    assert use_phase_emissions(EnergyLedger()) == 0
    led = EnergyLedger([rec(0, grid=100_000.0)])
    assert use_phase_emissions(led, Intensities(grid=28.0)) == pytest.approx(2.8)


def test_use_phase_matches_brute_force_resum():
    led = EnergyLedger([rec(k, pv=10.0 * k, grid=5.0 + k, cpv=k % 3, cgrid=0.5 * (k % 2), ups=2.0)
                        for k in range(50)])
    inten = Intensities(grid=28.0, pv=40.0)
    total_g = 0.0
    for r in led.records:
        total_g += (r.pv_to_load + r.charge_from_pv) / 1000.0 * 40.0
        total_g += (r.grid_to_load + r.charge_from_grid) / 1000.0 * 28.0
    assert use_phase_emissions(led, inten) == pytest.approx(total_g / 1000.0)


def record(embodied=100.0, first=4.0, years=1.0):
    spec = replace(default_node("laptop", "l"), embodied_carbon=embodied, first_life_years=first)
    led = EnergyLedger([rec(0, grid=1000.0)])
    return RunRecord(years * YEAR_S, [NodeUsage(spec, 1000.0, 5e6, 0.0)], led)


def test_empty_baseline_avoids_nothing():
    rep = compare_baseline(record(), [])
    assert rep.avoided_embodied == 0 and rep.baseline is None and rep.improvement_factor is None


def test_second_life_only_strictly_below_full():
    r = record(embodied=100.0)
    full = compare_baseline(r, policy=AllocationPolicy.FULL_EMBODIED).cci
    free = compare_baseline(r, policy=AllocationPolicy.SECOND_LIFE_ONLY).cci
    assert free < full


def test_storage_only_energy_is_not_lost():
    spec = default_node("laptop", "l")
    led = EnergyLedger([rec(0, cgrid=500.0)])
    rep = compare_baseline(RunRecord(3600.0, [NodeUsage(spec, 0.0, 0.0, 0.0)], led))
    assert rep.use_phase == pytest.approx(use_phase_emissions(led))
    assert rep.rows[-1].node == "(storage)"


def test_baseline_on_grid_with_linear_power():
    srv = replace(default_node("server", "s"), embodied_carbon=600.0, first_life_years=3.0,
                  idle_power=100.0, peak_power=300.0, cpu_mips=1000.0)
    b = baseline_impact([srv], YEAR_S, 0.5 * 1000.0 * YEAR_S, 0.0, grid_intensity=28.0)
    assert b.utilization == pytest.approx(0.5)
    assert b.embodied_total == 600.0
    assert b.embodied_prorated == pytest.approx(200.0)
    assert b.energy_wh == pytest.approx(200.0 * YEAR_S / 3600.0)
    assert b.use_phase == pytest.approx(b.energy_wh / 1000.0 * 28.0 / 1000.0)
    with pytest.raises(DomainError):
        baseline_impact([srv], YEAR_S, 2 * 1000.0 * YEAR_S, 0.0)


def test_categories_stub():
    rep = compare_baseline(record())
    assert len(IMPACT_CATEGORIES) == 18
    assert rep.categories["climate_change"] == pytest.approx(rep.embodied_allocated + rep.use_phase)
    assert all(v is None for k, v in rep.categories.items() if k != "climate_change")


@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(1e-3, 1e6), st.floats(1.0, 10.0))
def test_cci_monotonicity(e, u, gi, k):
    base = cci(e, u, gi)
    assert cci(e, u, gi * k) <= base + 1e-12
    assert cci(e * k, u, gi) >= base - 1e-12
    assert cci(e, u * k, gi) >= base - 1e-12


@given(st.floats(0, 1e4), st.floats(0, 20), st.floats(0, 20))
def test_allocation_bounded(embodied, first, second):
    spec = replace(default_node("desktop", "d"), embodied_carbon=embodied, first_life_years=first)
    for p in POLICIES:
        assert 0 <= allocate_embodied(spec, p, second) <= embodied + 1e-9


@given(st.floats(1.0, 1e4), st.floats(0.1, 10), st.floats(0.01, 10))
def test_policy_ordering(embodied, first, years):
    r = record(embodied, first, years)
    c = {p: compare_baseline(r, policy=p).cci for p in POLICIES}
    assert c[AllocationPolicy.SECOND_LIFE_ONLY] < c[AllocationPolicy.PRO_RATA_BY_YEARS] < c[AllocationPolicy.FULL_EMBODIED]


def test_report_rederives_from_run_directory(tmp_path):
    result = run(load_scenario("nominal"))
    write_run(result, tmp_path)
    direct = compare_baseline(result)
    again = compare_baseline(read_run(tmp_path))
    assert again.cci == pytest.approx(direct.cci, rel=1e-12)
    assert again.use_phase == pytest.approx(direct.use_phase, rel=1e-12)
    assert [r.node for r in again.rows] == [r.node for r in direct.rows]
