"""Command-line front end: power flow, dispatch optimization, certification,
fault simulation and the verification battery.

Exit codes: 0 success, 1 solver failure, 2 input error, 3 verification
failure.  Reports are JSON with a ``schema_version`` field; wall-clock
times live under the separate ``timing`` key so the rest of the report is
byte-reproducible for fixed inputs and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import optimize as opt
from .certify import (CertificateMismatch, check_wdot_negative,
                      grid_invariant_level, load_certificate,
                      save_certificate, solve_lmi, w_min_bruteforce, w_value)
from .fault import fault_cleared_taylor, make_scenario
from .gridcase import CaseError, load_case, load_scenario
from .lure import build_lure, design_sectors
from .nlp import NlpOptions
from .powerflow import (NonConvergence, SingularJacobian, SteadyState,
                        dispatch_injections, nominal_injections, pf_residual,
                        solve_pf, solve_pf_ramped)
from .sdp import LmiInfeasible
from .simulate import Verdict, assess_stability, simulate_fault, w_along

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_INPUT = 2
EXIT_VERIFY = 3


def _write_report(args, name: str, payload: dict, timing: dict | None = None):
    payload = dict(payload)
    payload["schema_version"] = SCHEMA_VERSION
    if timing:
        payload["timing"] = timing
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
    return path


def _round(x, nd=12):
    if isinstance(x, (list, tuple)):
        return [_round(v, nd) for v in x]
    if isinstance(x, float):
        return round(x, nd)
    return x


def _load_inputs(args):
    case = load_case(args.case)
    spec = load_scenario(args.scenario) if args.scenario else None
    if spec is not None and args.tc is not None:
        import dataclasses
        spec = dataclasses.replace(spec, t_clear=args.tc)
    scen = make_scenario(case, spec) if spec is not None else None
    return case, spec, scen


def _nominal_states(case, scen, tol=1e-12):
    from .gridcase import build_admittance
    inj = nominal_injections(case)
    y = scen.y_base if scen is not None else build_admittance(case)
    pre = solve_pf_ramped(case, inj, y, tol=tol)
    post = solve_pf_ramped(case, inj, scen.y_post, tol=tol, warm=pre) \
        if scen is not None else pre
    return inj, pre, post


def _certify(case, scen, xi, tol=1e-12):
    _, pre, post = _nominal_states(case, scen, tol)
    sys = build_lure(case, post, scen.y_post)
    sectors = design_sectors(case, scen.y_post, xi=xi)
    cert = solve_lmi(sys, sectors)
    return pre, post, sys, sectors, cert


def cmd_pf(args) -> int:
    case, _, scen = _load_inputs(args)
    y = scen.y_base if scen else None
    if y is None:
        from .gridcase import build_admittance
        y = build_admittance(case)
    inj = nominal_injections(case)
    t0 = time.perf_counter()
    state = solve_pf_ramped(case, inj, y)
    wall = time.perf_counter() - t0
    res = float(np.max(np.abs(pf_residual(state, case, inj, y)))) \
        if case.n_bus > 1 else 0.0
    report = {
        "kind": "pf",
        "case": case.name,
        "v": _round(state.v.tolist()),
        "theta": _round(state.theta.tolist()),
        "max_residual": res,
    }
    path = _write_report(args, "pf.json", report, {"wall_s": wall})
    print(f"power flow solved: max residual {res:.3e} -> {path}")
    return EXIT_OK


def _dispatch_report(case, sol, vm):
    a1 = np.array([g.a1 for g in case.generators])
    a2 = np.array([g.a2 for g in case.generators])
    p = sol.x[vm["p_g"]]
    return {
        "p_g": _round(p.tolist()),
        "q_g": _round(sol.x[vm["q_g"]].tolist()),
        "cost": float(np.sum(a1 * p ** 2 + a2 * p)),
        "status": sol.status,
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
    }


def cmd_opf(args) -> int:
    case, _, _ = _load_inputs(args)
    t0 = time.perf_counter()
    sol = opt.solve_opf(case)
    wall = time.perf_counter() - t0
    if sol.status != "Optimal":
        print(f"OPF failed: {sol.status} (kkt {sol.kkt_residual:.2e})")
        return EXIT_SOLVER
    prob = opt.build_opf(case)
    vm = prob.meta["vm"]
    report = {"kind": "opf", "case": case.name}
    report.update(_dispatch_report(case, sol, vm))
    report["v"] = _round(sol.x[vm["v"]].tolist())
    report["theta"] = _round(sol.x[vm["th"]].tolist())
    path = _write_report(args, "opf.json", report, {"wall_s": wall})
    print(f"OPF optimal: cost {report['cost']:.6f} "
          f"dispatch {report['p_g']} -> {path}")
    return EXIT_OK


def cmd_certify(args) -> int:
    case, _, scen = _load_inputs(args)
    if scen is None:
        print("certify requires --scenario", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.perf_counter()
    pre, post, sys_l, sectors, cert = _certify(case, scen, args.xi)
    wall = time.perf_counter() - t0
    rep = check_wdot_negative(cert, sys_l, n_samples=args.samples,
                              seed=args.seed)
    cert_path = args.cert or os.path.join(args.out, "certificate.json")
    os.makedirs(args.out, exist_ok=True)
    save_certificate(cert_path, cert)
    level = grid_invariant_level(cert, sys_l)
    report = {
        "kind": "certify",
        "case": case.name,
        "lmi_margin": cert.lmi_margin,
        "lambda_min": cert.lambda_min,
        "w_min": level.w_min,
        "wdot_sampled": rep.n_sampled,
        "wdot_nonnegative": rep.n_nonnegative,
        "wdot_worst": rep.worst,
        "certificate": cert_path,
    }
    path = _write_report(args, "certify.json", report, {"wall_s": wall})
    print(f"certificate: lmi margin {cert.lmi_margin:.3e}, "
          f"sampled dW/dt worst {rep.worst:.3e} "
          f"({rep.n_nonnegative}/{rep.n_sampled} nonnegative) -> {path}")
    return EXIT_OK if rep.n_nonnegative == 0 else EXIT_VERIFY


def cmd_tscopf(args) -> int:
    case, _, scen = _load_inputs(args)
    if scen is None:
        print("tscopf requires --scenario", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.perf_counter()
    if args.cert:
        _, pre, post = _nominal_states(case, scen)
        sys_l = build_lure(case, post, scen.y_post)
        cert = load_certificate(args.cert, sys_l)
    else:
        _, _, _, _, cert = _certify(case, scen, args.xi)
    sol, prob, opf_sol = opt.solve_tscopf(
        case, scen, cert, variant=args.variant, epsilon=args.epsilon,
        taylor_order=args.taylor_order, seed=args.seed)
    wall = time.perf_counter() - t0
    if sol.status != "Optimal":
        print(f"TSCOPF failed: {sol.status} (kkt {sol.kkt_residual:.2e})")
        return EXIT_SOLVER
    vm = prob.meta["vm"]
    th1 = opt.verify_theorem1(sol, prob)
    report = {"kind": "tscopf", "case": case.name, "variant": args.variant,
              "epsilon": prob.meta["epsilon"]}
    report.update(_dispatch_report(case, sol, vm))
    report["w_min"] = th1["w_min"]
    report["wmin_min_slack"] = th1["min_slack"]
    report["opf_cost"] = opf_sol.f
    report["binding_wmin_bound"] = th1["binding"]
    path = _write_report(args, "tscopf.json", report, {"wall_s": wall})
    print(f"TSCOPF ({args.variant}) optimal: cost {report['cost']:.6f} "
          f"(OPF {opf_sol.f:.6f}), Wmin {th1['w_min']:.4f} -> {path}")
    return EXIT_OK


def _plot_traj(traj, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, pos in enumerate(traj.dyn_positions):
        ax.plot(traj.t, traj.delta[:, k], lw=1.1, label=f"bus {pos}")
    ax.axvline(traj.tc, color="k", ls=":", lw=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("angle [rad]")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _simulate_dispatch(case, scen, p_g, q_g, t_end, h, sys_fallback=None,
                       warm_pre: SteadyState | None = None,
                       warm_post: SteadyState | None = None):
    """Simulate the fault from a dispatch; the polytope/quiescence verdict
    is taken against the dispatch's own post-fault equilibrium.  Without
    one (outside the post-fault loadability region) voltages are held at
    pre-fault values and the verdict is Unstable."""
    inj = dispatch_injections(case, np.asarray(p_g),
                              np.asarray(q_g) if q_g is not None else None)
    pre = solve_pf_ramped(case, inj, scen.y_base, tol=1e-10, warm=warm_pre)
    try:
        post = solve_pf_ramped(case, inj, scen.y_post, tol=1e-10,
                               warm=warm_post if warm_post is not None else pre)
        post_exists = True
        sys_l = build_lure(case, post, scen.y_post)
    except NonConvergence:
        post = pre
        post_exists = False
        sys_l = sys_fallback
    traj = simulate_fault(case, scen, pre, post, t_end=t_end, h=h)
    verdict, detail = (Verdict.UNSTABLE,
                       {"reason": "no post-fault equilibrium"})
    if sys_l is not None:
        verdict, detail = assess_stability(traj, sys_l, window=args_window(t_end))
        if not post_exists and verdict != Verdict.UNSTABLE:
            verdict = Verdict.UNSTABLE
            detail = {"reason": "no post-fault equilibrium"}
    return traj, verdict, detail, post_exists


def args_window(t_end: float) -> float:
    return min(3.0, max(1.0, 0.2 * t_end))


def cmd_simulate(args) -> int:
    case, _, scen = _load_inputs(args)
    if scen is None:
        print("simulate requires --scenario", file=sys.stderr)
        return EXIT_INPUT
    if args.dispatch:
        with open(args.dispatch, encoding="utf-8") as f:
            d = json.load(f)
        p_g = d["p_g"]
        q_g = d.get("q_g")
    else:
        p_g = [g.p_set if g.p_set is not None else 0.0
               for g in case.generators]
        q_g = None
    _, _, post_nom = _nominal_states(case, scen)
    sys_l = build_lure(case, post_nom, scen.y_post)
    t0 = time.perf_counter()
    traj, verdict, detail, post_exists = _simulate_dispatch(
        case, scen, p_g, q_g, args.horizon, args.step, sys_l)
    wall = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "trajectory.csv")
    traj.write_csv(csv_path)
    svg_path = os.path.join(args.out, "angles.svg")
    _plot_traj(traj, svg_path)
    report = {
        "kind": "simulate",
        "case": case.name,
        "dispatch": _round(list(map(float, p_g))),
        "verdict": verdict.value,
        "detail": {k: v for k, v in detail.items()},
        "post_fault_equilibrium": post_exists,
        "trajectory_csv": csv_path,
        "plot_svg": svg_path,
    }
    path = _write_report(args, "simulate.json", report, {"wall_s": wall})
    print(f"simulated fault: verdict {verdict.value} -> {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    case, spec, scen = _load_inputs(args)
    if scen is None:
        print("verify requires --scenario", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.perf_counter()
    checks = {}
    ok = True

    inj, pre, post = _nominal_states(case, scen)
    sys_l = build_lure(case, post, scen.y_post)
    sectors = design_sectors(case, scen.y_post, xi=args.xi)
    if args.cert:
        cert = load_certificate(args.cert, sys_l)
    else:
        cert = solve_lmi(sys_l, sectors)

    # 1. sampled Lyapunov decay
    rep = check_wdot_negative(cert, sys_l, n_samples=args.samples,
                              seed=args.seed)
    checks["wdot_sampling"] = {
        "pass": rep.n_nonnegative == 0,
        "worst": rep.worst,
        "n": rep.n_sampled,
    }

    # 2. invariant level oracle equality
    level = grid_invariant_level(cert, sys_l)
    brute = w_min_bruteforce(cert, sys_l,
                             bounds=list(zip(sys_l.y_lo, sys_l.y_hi)))
    rel = abs(level.w_min - brute) / max(abs(brute), 1e-300)
    checks["wmin_oracle"] = {"pass": rel <= 1e-6, "closed": level.w_min,
                             "bruteforce": brute, "rel_err": rel}

    # 3. series vs integration at the clearing time
    xc = fault_cleared_taylor(case, pre, post, scen, order=args.taylor_order)
    traj_tc = simulate_fault(case, scen, pre, post, t_end=scen.t_clear,
                             h=scen.t_clear / 400.0)
    x_sim = np.concatenate([
        traj_tc.delta[-1] - post.theta[list(sys_l.dyn_positions)],
        traj_tc.omega[-1] - 1.0])
    terr = float(np.max(np.abs(xc.x - x_sim)))
    checks["taylor_vs_rk4"] = {"pass": terr <= 1e-3, "max_err": terr,
                               "t_clear": scen.t_clear}

    # 4. stability-constrained solve and bound activity
    sol, prob, opf_sol = opt.solve_tscopf(
        case, scen, cert, variant=args.variant, epsilon=args.epsilon,
        taylor_order=args.taylor_order, seed=args.seed)
    vm = prob.meta["vm"]
    th1 = opt.verify_theorem1(sol, prob)
    checks["theorem1_binding"] = {
        "pass": sol.status == "Optimal" and th1["binding"],
        "status": sol.status, "min_slack": th1["min_slack"],
        "w_min": th1["w_min"],
    }

    # 5. hull geometry
    params = opt.default_hull_params_from(
        prob.meta["lam"], case, prob.meta["alpha"], prob.meta["delta_l"])
    th2 = opt.verify_theorem2(params, n_samples=args.samples, seed=args.seed)
    checks["theorem2_geometry"] = {
        "pass": (th2["hull_containment_violations"] == 0
                 and th2["inner_containment_violations"] == 0
                 and th2["all_vertices_ok"]),
        "hull_violations": th2["hull_containment_violations"],
        "inner_violations": th2["inner_containment_violations"],
        "vertices_ok": th2["all_vertices_ok"],
    }

    # 6. end-to-end: simulated verdicts and cost ordering
    a1 = np.array([g.a1 for g in case.generators])
    a2 = np.array([g.a2 for g in case.generators])
    opf_vm = opt.build_opf(case).meta["vm"]
    p_opf = opf_sol.x[opf_vm["p_g"]]
    warm_opf = SteadyState(v=opf_sol.x[opf_vm["v"]],
                           theta=opf_sol.x[opf_vm["th"]])
    _, v_opf, d_opf, _ = _simulate_dispatch(
        case, scen, p_opf, None, args.horizon, args.step, sys_l,
        warm_pre=warm_opf)
    p_ts = sol.x[vm["p_g"]]
    warm_ts = SteadyState(v=sol.x[vm["v"]], theta=sol.x[vm["th"]])
    if prob.meta["restores"]:
        warm_ts_post = warm_ts
    else:
        warm_ts_post = SteadyState(v=sol.x[vm["v2"]],
                                   theta=sol.x[vm["th2"]])
    _, v_ts, d_ts, _ = _simulate_dispatch(
        case, scen, p_ts, None, args.horizon, args.step, sys_l,
        warm_pre=warm_ts, warm_post=warm_ts_post)
    f_ts = float(np.sum(a1 * p_ts ** 2 + a2 * p_ts))
    cost_rel = (f_ts - opf_sol.f) / max(abs(opf_sol.f), 1e-12)
    checks["end_to_end"] = {
        "pass": (v_ts == Verdict.STABLE
                 and f_ts >= opf_sol.f - 1e-6 * max(1.0, abs(opf_sol.f))),
        "opf_verdict": v_opf.value,
        "tscopf_verdict": v_ts.value,
        "opf_cost": opf_sol.f,
        "tscopf_cost": f_ts,
        "cost_increase_percent": 100.0 * cost_rel,
        "opf_dispatch": _round(p_opf.tolist()),
        "tscopf_dispatch": _round(p_ts.tolist()),
    }

    wall = time.perf_counter() - t0
    ok = all(c["pass"] for c in checks.values())
    report = {"kind": "verify", "case": case.name,
              "variant": args.variant, "checks": checks, "pass": ok}
    path = _write_report(args, "verify.json", report, {"wall_s": wall})
    for name, c in checks.items():
        print(f"  [{'PASS' if c['pass'] else 'FAIL'}] {name}")
    print(f"verification {'passed' if ok else 'FAILED'} -> {path}")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tscopf",
        description="stability-constrained dispatch toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True, help="case JSON file")
    common.add_argument("--scenario", help="fault scenario JSON file")
    common.add_argument("--variant", default="inner",
                        choices=["concave", "hull", "inner"])
    common.add_argument("--epsilon", type=float, default=None,
                        help="objective perturbation on Wmin")
    common.add_argument("--xi", type=float, default=1e-3,
                        help="lower sector slope")
    common.add_argument("--taylor-order", type=int, default=3)
    common.add_argument("--tc", type=float, default=None,
                        help="override scenario clearing time [s]")
    common.add_argument("--horizon", type=float, default=10.0)
    common.add_argument("--step", type=float, default=1e-3)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--samples", type=int, default=10_000)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--format", default="json", choices=["json", "csv"])
    common.add_argument("--cert", help="certificate cache path")
    common.add_argument("--dispatch", help="dispatch JSON for simulate")
    for name, fn in (("pf", cmd_pf), ("opf", cmd_opf),
                     ("certify", cmd_certify), ("tscopf", cmd_tscopf),
                     ("simulate", cmd_simulate), ("verify", cmd_verify)):
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CaseError, CertificateMismatch, FileNotFoundError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NonConvergence, SingularJacobian, LmiInfeasible) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
