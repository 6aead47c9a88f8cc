from importlib.resources import files

import pytest

from saev_resilience.config import apply_overrides, load_scenario, parse_override, scenario_from_dict
from saev_resilience.scenario import ScenarioError

TINY = files("saev_resilience") / "data" / "tiny.toml"
NET = {"network": {"travel_time": [[0, 1], [1, 0]]}}


def test_packaged_example_loads():
    sc = load_scenario(TINY)
    assert sc.name == "tiny" and sc.params.fleet_size == 2 and sc.placement == [0, 2]
    assert sc.arrivals().P.sum() == 5


def test_override_parses_toml_values():
    assert parse_override("params.fleet_size=4") == ("params", "fleet_size", 4)
    assert parse_override("mpc.terminal=shrink") == ("mpc", "terminal", "shrink")
    assert parse_override("fleet.placement=[0, 1]") == ("fleet", "placement", [0, 1])


def test_override_applies_without_touching_the_original():
    doc = {"params": {"fleet_size": 2}}
    new = apply_overrides(doc, ["params.fleet_size=5"])
    assert new["params"]["fleet_size"] == 5 and doc["params"]["fleet_size"] == 2


@pytest.mark.parametrize("text", ["params.nope=1", "bogus.x=1", "fleet_size=3", "params.fleet_size"])
def test_bad_overrides_rejected(text):
    with pytest.raises(ScenarioError):
        parse_override(text)


@pytest.mark.parametrize("doc", [{**NET, "extra": 1}, {**NET, "params": {"colour": 1}}, {**NET, "weird": {}}])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ScenarioError, match="unknown"):
        scenario_from_dict(doc)


def test_network_required():
    with pytest.raises(ScenarioError, match="network"):
        scenario_from_dict({})


def test_file_source_needs_arrivals():
    with pytest.raises(ScenarioError, match="arrivals"):
        scenario_from_dict({**NET, "demand": {"source": "file"}})


def test_fingerprint_ignores_outage_when_asked():
    a = scenario_from_dict({**NET, "outage": {"q_demand": 0.009, "events": [{"node": 1, "start": 0, "end": 2}]}})
    b = scenario_from_dict(NET)
    assert a.fingerprint(include_outage=False) == b.fingerprint(include_outage=False)
    assert a.fingerprint() != b.fingerprint()
