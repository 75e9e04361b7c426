import os

import numpy as np
import pytest

import tscopf as t
from tscopf.powerflow import solve_pf_ramped

CASES_DIR = os.path.join(os.path.dirname(t.__file__), "cases")


def case_path(name):
    return os.path.join(CASES_DIR, f"{name}.json")


def scenario_path(name):
    return os.path.join(CASES_DIR, f"{name}_fault.json")


class Pipeline:
    """Shared per-case chain: states, feedback system and certificate."""

    def __init__(self, name):
        self.name = name
        self.case = t.load_case(case_path(name))
        self.spec = t.load_scenario(scenario_path(name))
        self.scen = t.make_scenario(self.case, self.spec)
        self.inj = t.nominal_injections(self.case)
        self.pre = solve_pf_ramped(self.case, self.inj, self.scen.y_base,
                                   tol=1e-12)
        self.post = solve_pf_ramped(self.case, self.inj, self.scen.y_post,
                                    tol=1e-12, warm=self.pre)
        self.sys = t.build_lure(self.case, self.post, self.scen.y_post)
        self.sectors = t.design_sectors(self.case, self.scen.y_post)
        self.cert = t.solve_lmi(self.sys, self.sectors)
        self.level = t.grid_invariant_level(self.cert, self.sys)


_CACHE = {}


def pipeline(name) -> Pipeline:
    if name not in _CACHE:
        _CACHE[name] = Pipeline(name)
    return _CACHE[name]


@pytest.fixture(scope="session")
def pipe2():
    return pipeline("case2")


@pytest.fixture(scope="session")
def pipe3():
    return pipeline("case3")


@pytest.fixture(scope="session")
def pipe9():
    return pipeline("case9")


@pytest.fixture(scope="session")
def all_pipes(pipe2, pipe3, pipe9):
    return [pipe2, pipe3, pipe9]


def lossy_ring_dict():
    """3-bus lossy ring with branch parameters from r/x values
    (y = 1/(r + jx)): used by admittance tests."""
    def series(r, x):
        y = 1.0 / complex(r, x)
        return y.real, y.imag

    g12, b12 = series(0.02, 0.2)
    g23, b23 = series(0.03, 0.25)
    g13, b13 = series(0.01, 0.4)
    return {
        "name": "ring3_lossy",
        "buses": [
            {"id": 1, "kind": "generator"},
            {"id": 2, "kind": "load"},
            {"id": 3, "kind": "load"},
        ],
        "branches": [
            {"from": 1, "to": 2, "g": g12, "b": b12},
            {"from": 2, "to": 3, "g": g23, "b": b23},
            {"from": 1, "to": 3, "g": g13, "b": b13},
        ],
        "generators": [
            {"bus": 1, "p_max": 2.0, "m": 0.1, "d": 0.4, "p_set": 0.6},
        ],
        "loads": [
            {"bus": 2, "p": 0.35, "d": 0.3},
            {"bus": 3, "p": 0.25, "d": 0.3},
        ],
        "limits": {"v_min": 0.9, "v_max": 1.1},
    }
