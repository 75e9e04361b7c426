import dataclasses

import numpy as np
import pytest

import tscopf as t
from tscopf.fault import implied_injections
from tscopf.simulate import (PhaseParams, Verdict, assess_stability,
                             integrate_selfcheck, rhs, simulate_fault,
                             simulate_nominal, w_along)


def test_equilibrium_fixpoint(all_pipes):
    for pipe in all_pipes:
        pg, pl = implied_injections(pipe.case, pipe.post, pipe.scen.y_post)
        params = PhaseParams(y=pipe.scen.y_post, v=pipe.post.v,
                             p_gen=pg, p_load=pl)
        dd, dw = rhs(pipe.case, params, pipe.post.theta,
                     np.ones(len(pipe.case.gen_positions)))
        assert np.max(np.abs(dd)) <= 1e-9
        assert np.max(np.abs(dw)) <= 1e-9


def test_equilibrium_trajectory_constant(pipe3):
    traj = simulate_nominal(pipe3.case, pipe3.post, pipe3.scen.y_post,
                            np.zeros(pipe3.sys.n_state), t_end=1.0, h=1e-3)
    assert np.max(np.abs(traj.delta - traj.delta[0])) <= 1e-10
    v, _ = assess_stability(traj, pipe3.sys, window=0.5)
    assert v == Verdict.STABLE


def test_rk4_order(pipe2):
    """Endpoint error scales as h^4 within a factor-2 band."""
    case, scen, pre, post = pipe2.case, pipe2.scen, pipe2.pre, pipe2.post

    def endpoint(h):
        traj = simulate_fault(case, scen, pre, post, t_end=1.0, h=h)
        return np.concatenate([traj.delta[-1], traj.omega[-1]])

    ref = endpoint(1e-3 / 8)
    e1 = np.max(np.abs(endpoint(8e-3) - ref))
    e2 = np.max(np.abs(endpoint(4e-3) - ref))
    assert 8.0 <= e1 / e2 <= 32.0


def test_selfcheck_passes(pipe2):
    integrate_selfcheck(pipe2.case, pipe2.scen, pipe2.pre, pipe2.post,
                        t_end=2.0, h=1e-3)


def test_phase_grid_hits_clearing_time(pipe2):
    traj = simulate_fault(pipe2.case, pipe2.scen, pipe2.pre, pipe2.post,
                          t_end=1.0, h=3e-3)
    assert np.min(np.abs(traj.t - pipe2.scen.t_clear)) < 1e-12
    assert np.all(np.diff(traj.t) > 0)


def test_two_bus_stability_threshold(pipe2):
    """Dispatches beyond the simulator-derived transfer limit lose
    synchronism; the nominal half-load dispatch rides through."""
    case, scen = pipe2.case, pipe2.scen

    def verdict(p2):
        inj = t.dispatch_injections(case, np.array([1.0 - p2, p2]))
        pre = t.solve_pf(case, inj, scen.y_base, tol=1e-10)
        try:
            post = t.solve_pf(case, inj, scen.y_post, tol=1e-10, warm=pre)
        except t.NonConvergence:
            post = pre
        sys = (t.build_lure(case, post, scen.y_post)
               if post is not pre else pipe2.sys)
        traj = simulate_fault(case, scen, pre, post, t_end=8.0, h=2e-3)
        return assess_stability(traj, sys, window=2.0)[0]

    assert verdict(1.0) == Verdict.UNSTABLE
    assert verdict(0.5) == Verdict.STABLE
    # simulator bisection localizes the limit strictly below the demand
    lo, hi = 0.5, 1.0
    for _ in range(6):
        mid = 0.5 * (lo + hi)
        if verdict(mid) == Verdict.STABLE:
            lo = mid
        else:
            hi = mid
    assert 0.5 < lo < hi < 1.0


def test_certified_state_rides_through(pipe3):
    """A fault-cleared state inside the invariant set implies a Stable
    simulation verdict."""
    from tscopf.fault import fault_cleared_taylor
    pipe = pipe3
    fc = fault_cleared_taylor(pipe.case, pipe.pre, pipe.post, pipe.scen,
                              order=3)
    if t.w_value(pipe.cert, fc.x) <= pipe.level.w_min:
        traj = simulate_fault(pipe.case, pipe.scen, pipe.pre, pipe.post,
                              t_end=8.0, h=1e-3)
        v, _ = assess_stability(traj, pipe.sys, window=2.0)
        assert v == Verdict.STABLE


def test_w_along_nonincreasing_inside_omega(pipe2):
    rng = np.random.default_rng(12)
    cert, sys, lev = pipe2.cert, pipe2.sys, pipe2.level
    chol = np.linalg.cholesky(cert.p)
    for _ in range(5):
        u = rng.standard_normal(cert.p.shape[0])
        u /= np.linalg.norm(u)
        x0 = cert.u @ (np.linalg.solve(chol.T, u)
                       * np.sqrt(0.99 * lev.w_min) * rng.uniform(0.3, 1.0))
        traj = simulate_nominal(pipe2.case, pipe2.post, pipe2.scen.y_post,
                                x0, t_end=6.0, h=1e-3)
        w, violations = w_along(traj, cert, sys)
        assert len(violations) == 0
        assert traj.w is not None and traj.w[0] <= lev.w_min


def test_blowup_flagged_unstable(pipe2):
    case, scen = pipe2.case, pipe2.scen
    inj = t.dispatch_injections(case, np.array([0.0, 1.0]))
    pre = t.solve_pf(case, inj, scen.y_base, tol=1e-10)
    traj = simulate_fault(case, scen, pre, pre, t_end=20.0, h=2e-3)
    v, detail = assess_stability(traj, pipe2.sys)
    assert v == Verdict.UNSTABLE


def test_short_horizon_inconclusive(pipe3):
    x0 = np.zeros(pipe3.sys.n_state)
    x0[0] = 0.05
    traj = simulate_nominal(pipe3.case, pipe3.post, pipe3.scen.y_post, x0,
                            t_end=0.05, h=1e-3)
    v, detail = assess_stability(traj, pipe3.sys, window=2.0)
    assert v == Verdict.INCONCLUSIVE


def test_trajectory_csv(tmp_path, pipe2):
    traj = simulate_fault(pipe2.case, pipe2.scen, pipe2.pre, pipe2.post,
                          t_end=0.5, h=1e-2)
    w_along(traj, pipe2.cert, pipe2.sys)
    path = tmp_path / "traj.csv"
    traj.write_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("t,delta_")
    assert lines[0].endswith(",W")
    assert len(lines) == len(traj.t) + 1
