import json
import math

import numpy as np
import pytest

import tscopf as t
from tscopf.gridcase import CaseError

from conftest import case_path, lossy_ring_dict, scenario_path


def test_load_case2_shape():
    case = t.load_case(case_path("case2"))
    assert case.n_bus == 2
    assert len(case.branches) == 2  # double-circuit line
    assert case.buses[0].kind == "infinite"
    assert case.buses[1].kind == "generator"
    assert case.slack_position == 0


def test_unknown_bus_in_branch():
    raw = lossy_ring_dict()
    raw["branches"][0]["to"] = 99
    with pytest.raises(CaseError, match="unknown bus"):
        t.case_from_dict(raw)


def test_disconnected_graph_rejected():
    raw = lossy_ring_dict()
    raw["branches"] = raw["branches"][:1]  # bus 3 unreachable
    with pytest.raises(CaseError, match="not connected"):
        t.case_from_dict(raw)


def test_invariant_violations_named():
    raw = lossy_ring_dict()
    raw["generators"][0]["m"] = 0.0
    with pytest.raises(CaseError, match="inertia"):
        t.case_from_dict(raw)
    raw = lossy_ring_dict()
    raw["loads"][0]["d"] = 0.0
    with pytest.raises(CaseError, match="damping"):
        t.case_from_dict(raw)
    raw = lossy_ring_dict()
    raw["limits"]["v_min"] = -0.5
    with pytest.raises(CaseError, match="v_min"):
        t.case_from_dict(raw)


def test_ring_admittance_matches_hand_computation():
    raw = lossy_ring_dict()
    case = t.case_from_dict(raw)
    y = t.build_admittance(case)
    # hand-build from the branch series admittances
    ys = {(0, 1): complex(raw["branches"][0]["g"], raw["branches"][0]["b"]),
          (1, 2): complex(raw["branches"][1]["g"], raw["branches"][1]["b"]),
          (0, 2): complex(raw["branches"][2]["g"], raw["branches"][2]["b"])}
    expect = np.zeros((3, 3), dtype=complex)
    for (i, j), v in ys.items():
        expect[i, j] = expect[j, i] = -v
        expect[i, i] += v
        expect[j, j] += v
    assert len(case.branches) == 3
    np.testing.assert_allclose(y.y, expect, atol=1e-15)


def test_admittance_symmetric_and_sparsity(pipe3):
    y = t.build_admittance(pipe3.case)
    np.testing.assert_allclose(y.y, y.y.T, atol=0)
    adj = np.zeros((3, 3), dtype=bool)
    for br in pipe3.case.branches:
        i, j = pipe3.case.bus_pos(br.from_bus), pipe3.case.bus_pos(br.to_bus)
        adj[i, j] = adj[j, i] = True
    off = ~np.eye(3, dtype=bool)
    assert np.array_equal(np.abs(y.y[off]) > 0, adj[off])


def test_remove_then_rebuild_reproduces_base():
    raw = lossy_ring_dict()
    case = t.case_from_dict(raw)
    spec = t.scenario_from_dict(
        {"fault_type": "midpoint_ltg", "faulted_branch": 1, "t_clear": 0.1})
    y_post = t.build_admittance(case, "postfault", spec)
    reduced = dict(raw)
    reduced["branches"] = [raw["branches"][0], raw["branches"][2]]
    # keep connectivity: 1-2 and 1-3 remain
    y_two = t.build_admittance(t.case_from_dict(reduced))
    np.testing.assert_allclose(y_post.y, y_two.y, atol=1e-15)
    # re-adding the branch reproduces the base matrix to machine precision
    y_base = t.build_admittance(case)
    br = case.branches[1]
    y_back = y_post.y.copy()
    i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
    ys = br.series_admittance()
    y_back[i, j] -= ys
    y_back[j, i] -= ys
    y_back[i, i] += ys
    y_back[j, j] += ys
    np.testing.assert_allclose(y_back, y_base.y, atol=1e-15)


def test_midpoint_fault_grounds_both_ends():
    case = t.load_case(case_path("case2"))
    spec = t.load_scenario(scenario_path("case2"))
    y = t.build_admittance(case)
    y_on = t.build_admittance(case, "faulted", spec)
    br = case.branches[spec.faulted_branch]
    ys = br.series_admittance()
    # faulted line removed, each end grounded through half the line
    assert y_on.y[0, 1] == pytest.approx(y.y[0, 1] + ys)
    assert y_on.y[0, 0] == pytest.approx(y.y[0, 0] + ys)  # -ys + 2ys
    assert y_on.y[1, 1] == pytest.approx(y.y[1, 1] + ys)


def test_shunt_only_case_is_diagonal():
    raw = {
        "name": "single",
        "buses": [{"id": 1, "kind": "generator", "shunt_g": 0.1,
                   "shunt_b": -0.5}],
        "branches": [],
        "generators": [{"bus": 1, "p_max": 1.0, "m": 0.1, "d": 0.1}],
        "loads": [],
        "limits": {"v_min": 0.9, "v_max": 1.1},
    }
    y = t.build_admittance(t.case_from_dict(raw))
    assert y.y.shape == (1, 1)
    assert y.y[0, 0] == pytest.approx(0.1 - 0.5j)


def test_alpha_range_and_lossless_zero(pipe2):
    raw = lossy_ring_dict()
    y = t.build_admittance(t.case_from_dict(raw))
    assert np.all(y.branch_alpha > -math.pi / 2)
    assert np.all(y.branch_alpha <= math.pi / 2)
    assert np.all(y.branch_alpha != 0.0)  # lossy branches
    y2 = t.build_admittance(pipe2.case)
    np.testing.assert_allclose(y2.branch_alpha, 0.0, atol=0)


def test_scenario_parsing_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseError, match="invalid JSON"):
        t.load_scenario(str(p))
    p.write_text(json.dumps({"fault_type": "weird", "t_clear": 0.1}))
    with pytest.raises(CaseError, match="fault_type"):
        t.load_scenario(str(p))
    p.write_text(json.dumps({"fault_type": "midpoint_ltg", "t_clear": 0.1}))
    with pytest.raises(CaseError, match="faulted_branch"):
        t.load_scenario(str(p))


def test_scenario_nonexistent_branch():
    case = t.load_case(case_path("case2"))
    spec = t.scenario_from_dict(
        {"fault_type": "midpoint_ltg", "faulted_branch": 7, "t_clear": 0.1})
    with pytest.raises(CaseError, match="nonexistent branch"):
        t.build_admittance(case, "faulted", spec)


def test_variant_requires_scenario():
    case = t.load_case(case_path("case2"))
    with pytest.raises(CaseError, match="requires a scenario"):
        t.build_admittance(case, "faulted")
