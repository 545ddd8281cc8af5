import pytest

from ssdc.actions import EnterAmorphousMode, MigrateTask, PowerNodeOff, SetServiceLevel, StartTask, StopTask
from ssdc.devices import Status, default_node
from ssdc.energy import EnergySystem, GridSource
from ssdc.errors import StalePlanError
from ssdc.workload import default_catalog
from ssdc.world import Topology, World, cable, full_mesh


def world():
    specs = [default_node("desktop", "d1"), default_node("laptop", "l1"), default_node("smartphone", "p1"),
             default_node("smartphone", "p2")]
    topo = Topology({"sw0": True, "sw1": True}, cable(specs), full_mesh(s.id for s in specs))
    return World.build(60.0, specs, default_catalog(), EnergySystem(grid=GridSource(1000.0)), topo)


def test_cabling():
    w = world()
    assert w.topology.links["d1"] == ("sw0", "sw1")  # two NICs
    singles = [w.topology.links[n] for n in ("l1", "p1", "p2")]
    assert singles == [("sw0",), ("sw1",), ("sw0",)]


def test_reachability_follows_switches():
    w = world()
    assert w.reachable("p1")
    w.set_switch("sw1", False)
    assert not w.reachable("p1") and w.reachable("p2") and w.reachable("d1")
    w.set_switch("sw1", True)
    assert w.reachable("p1")


def test_full_mesh_pairs():
    assert full_mesh(["b", "a", "c"]) == (("a", "b"), ("a", "c"), ("b", "c"))


def test_apply_is_atomic():
    w = world()
    w.apply([SetServiceLevel("wiki", 1), StartTask("wiki#0", "p1")], w.version)
    v = w.version
    with pytest.raises(StalePlanError):
        w.apply([StartTask("wiki#1", "p2"), StartTask("wiki#0", "l1")], v)
    assert w.tasks["wiki#1"].node is None
    assert w.version == v


def test_apply_checks_version():
    w = world()
    with pytest.raises(StalePlanError):
        w.apply([SetServiceLevel("wiki", 1)], w.version + 1)


def test_node_with_tasks_cannot_power_off():
    w = world()
    w.apply([SetServiceLevel("wiki", 1), StartTask("wiki#0", "p1")], w.version)
    with pytest.raises(StalePlanError):
        w.apply([PowerNodeOff("p1")], w.version)
    w.apply([StopTask("wiki#0"), PowerNodeOff("p1")], w.version)
    assert w.states["p1"].status is Status.ENERGY_SHED


def test_failed_node_drops_tasks_and_migration_resumes_them():
    w = world()
    w.apply([SetServiceLevel("wiki", 1), StartTask("wiki#0", "p1")], w.version)
    assert w.served_levels()["wiki"] == 1
    w.set_status("p1", Status.FAILED)
    assert w.tasks["wiki#0"].node is None and w.last_node["wiki#0"] == "p1"
    assert w.served_levels()["wiki"] == 0
    w.apply([MigrateTask("wiki#0", "p1", "p2")], w.version)
    assert w.tasks["wiki#0"].node == "p2"


def test_level_zero_removes_tasks():
    w = world()
    w.apply([SetServiceLevel("wiki", 2), StartTask("wiki#0", "p1")], w.version)
    w.apply([StopTask("wiki#0"), SetServiceLevel("wiki", 0)], w.version)
    assert not any(t.startswith("wiki") for t in w.tasks)


def test_amorphous_flag_guarded():
    w = world()
    w.apply([EnterAmorphousMode()], w.version)
    with pytest.raises(StalePlanError):
        w.apply([EnterAmorphousMode()], w.version)


def test_demand_is_sum_of_node_powers():
    w = world()
    w.apply([SetServiceLevel("wiki", 1), StartTask("wiki#0", "p1")], w.version)
    assert w.demand() == pytest.approx(sum(w.node_powers().values()))
    assert w.node_powers()["p1"] > w.specs["p1"].idle_power
