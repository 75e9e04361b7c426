import json
import os

import numpy as np
import pytest

from tscopf import cli

from conftest import case_path, scenario_path


def run(args):
    return cli.main(args)


def test_pf_command(tmp_path):
    rc = run(["pf", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "pf.json").read_text())
    assert rep["max_residual"] <= 1e-8
    assert rep["schema_version"] == 1


def test_opf_command(tmp_path):
    rc = run(["opf", "--case", case_path("case2"), "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "opf.json").read_text())
    assert rep["cost"] == pytest.approx(5.02, abs=1e-4)
    assert rep["p_g"][1] == pytest.approx(1.0, abs=1e-6)


def test_certify_and_tscopf_with_cache(tmp_path):
    cert_path = str(tmp_path / "cert.json")
    rc = run(["certify", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--cert", cert_path,
              "--samples", "500"])
    assert rc == 0
    assert os.path.exists(cert_path)
    rep = json.loads((tmp_path / "certify.json").read_text())
    assert rep["lmi_margin"] <= -1e-8
    assert rep["wdot_nonnegative"] == 0

    rc = run(["tscopf", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--cert", cert_path,
              "--variant", "inner"])
    assert rc == 0
    rep = json.loads((tmp_path / "tscopf.json").read_text())
    assert rep["status"] == "Optimal"
    assert rep["cost"] >= rep["opf_cost"] - 1e-9
    assert rep["binding_wmin_bound"]


def test_corrupted_certificate_cache(tmp_path):
    cert_path = str(tmp_path / "cert.json")
    rc = run(["certify", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--cert", cert_path,
              "--samples", "200"])
    assert rc == 0
    d = json.loads(open(cert_path).read())
    d["p"][0][0] += 1.0
    with open(cert_path, "w") as f:
        json.dump(d, f)
    rc = run(["tscopf", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--cert", cert_path])
    assert rc == cli.EXIT_INPUT


def test_missing_case_file(tmp_path):
    rc = run(["pf", "--case", str(tmp_path / "nope.json"),
              "--out", str(tmp_path)])
    assert rc == cli.EXIT_INPUT


def test_simulate_command(tmp_path):
    rc = run(["simulate", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--horizon", "6"])
    assert rc == 0
    rep = json.loads((tmp_path / "simulate.json").read_text())
    assert rep["verdict"] == "Stable"
    assert os.path.exists(rep["trajectory_csv"])
    assert os.path.exists(rep["plot_svg"])
    svg = open(rep["plot_svg"]).read(200)
    assert svg.lstrip().startswith("<?xml")


def test_simulate_explicit_dispatch_unstable(tmp_path):
    disp = tmp_path / "disp.json"
    disp.write_text(json.dumps({"p_g": [0.0, 1.0]}))
    rc = run(["simulate", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--dispatch", str(disp),
              "--out", str(tmp_path), "--horizon", "8"])
    assert rc == 0
    rep = json.loads((tmp_path / "simulate.json").read_text())
    assert rep["verdict"] == "Unstable"
    assert not rep["post_fault_equilibrium"]


def test_verify_case2(tmp_path):
    rc = run(["verify", "--case", case_path("case2"),
              "--scenario", scenario_path("case2"),
              "--out", str(tmp_path), "--samples", "1500",
              "--horizon", "8"])
    assert rc == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["pass"]
    e2e = rep["checks"]["end_to_end"]
    assert e2e["opf_verdict"] == "Unstable"
    assert e2e["tscopf_verdict"] == "Stable"
    assert e2e["tscopf_cost"] >= e2e["opf_cost"]


def test_verify_zero_disturbance_costs_equal(tmp_path):
    scen = tmp_path / "null.json"
    scen.write_text(json.dumps({
        "fault_type": "bus_ltg", "fault_bus": 2, "t_clear": 0.1,
        "fault_admittance": [0.0, 0.0], "injection_scope": "none"}))
    rc = run(["verify", "--case", case_path("case3"),
              "--scenario", str(scen), "--out", str(tmp_path),
              "--samples", "1000", "--horizon", "8"])
    assert rc == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    e2e = rep["checks"]["end_to_end"]
    assert e2e["tscopf_cost"] == pytest.approx(e2e["opf_cost"], rel=1e-5)


def test_report_determinism(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    for out in (out1, out2):
        rc = run(["tscopf", "--case", case_path("case2"),
                  "--scenario", scenario_path("case2"),
                  "--out", str(out), "--seed", "42"])
        assert rc == 0
    r1 = json.loads((out1 / "tscopf.json").read_text())
    r2 = json.loads((out2 / "tscopf.json").read_text())
    r1.pop("timing")
    r2.pop("timing")
    assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)
