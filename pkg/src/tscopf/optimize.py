"""Dispatch optimization models with embedded stability certificates.

Builds the plain economic dispatch problem (quadratic generation cost
over the steady-state network constraints) and its stability-constrained
extension, in which the Taylor fault-cleared state must stay inside the
certified invariant set: W(x(tc)) <= Wmin, with Wmin bounded per branch
by one of three interchangeable families

    concave : Wmin <= lambda_i (X_i -+ dl)^2          (exact, nonconvex)
    hull    : Wmin <= lambda_i (pi^2 -+ pi X_i)       (convex hull, linear)
    inner   : hull shifted down by lambda_i Xbar^2/4  (inner approximation)

where X_i = -2 theta'_ij - 2 alpha_ij is the window-center coordinate of
branch i and lambda_i = 1 / (C_i' P^{-1} C_i).  A small -eps * Wmin
objective term pushes Wmin onto its smallest upper bound, which makes
the single-level model equivalent to the bilevel one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad
from .certify import CertificateMismatch, QuadraticCertificate
from .fault import FaultScenario, taylor_series_coeffs
from .gridcase import GENERATOR, INFINITE, PowerCase
from .lure import LureSystem
from .nlp import (ConstraintBlock, NlpOptions, NlpProblem, OptSolution,
                  solve_nlp)
from .powerflow import injection_derivatives, injections_p_all, injections_q_all

DEFAULT_EPSILON_SCALE = 1e-4
VARIANTS = ("concave", "hull", "inner")


@dataclass(frozen=True)
class HullParams:
    """Per-branch window geometry for the Wmin bounding constraints."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    delta_l: float
    lam: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        if np.any(self.x_lo > 0.0) or np.any(self.x_hi < 0.0):
            raise ValueError("window must contain 0 (x_lo <= 0 <= x_hi)")
        tl = 2.0 * self.delta_l
        if np.any(self.x_lo < -tl - 1e-12) or np.any(self.x_hi > tl + 1e-12):
            raise ValueError("window exceeds [-2 dl, 2 dl]")
        if np.any(self.lam <= 0.0):
            raise ValueError("lambda entries must be positive")


def branch_lambdas(cert: QuadraticCertificate, c_rows: np.ndarray) -> np.ndarray:
    """lambda_i = 1 / (C_i' P^{-1} C_i) on the reduced space."""
    c_red = c_rows @ cert.u
    quad = np.einsum("ij,jk,ik->i", c_red, cert.p_inv, c_red)
    return 1.0 / quad


def psi_bound(params: HullParams, k: int, x: float) -> float:
    """Original per-branch concave bound at window coordinate x."""
    return params.lam[k] * min((x - params.delta_l) ** 2,
                               (x + params.delta_l) ** 2)


def hull_constraints(params: HullParams):
    """Convex-hull pair: W <= slope * X + intercept per branch.

    Rows are ((slope_hi, icpt_hi), (slope_lo, icpt_lo)) with the first
    tight at (0, lam dl^2) and (x_hi, lam (x_hi - dl)^2), the second the
    x_lo mirror.
    """
    dl = params.delta_l
    s_hi = params.lam * (params.x_hi - 2.0 * dl)
    s_lo = params.lam * (params.x_lo + 2.0 * dl)
    icpt = params.lam * dl ** 2
    return (s_hi, icpt.copy()), (s_lo, icpt.copy())


def inner_constraints(params: HullParams):
    """Inner pair: the hull lines dropped by lam * (edge/2)^2, tangent to
    the concave boundary at the window mean-value points."""
    (s_hi, i_hi), (s_lo, i_lo) = hull_constraints(params)
    i_hi = i_hi - params.lam * params.x_hi ** 2 / 4.0
    i_lo = i_lo - params.lam * params.x_lo ** 2 / 4.0
    return (s_hi, i_hi), (s_lo, i_lo)


def grid_hull_constraints(cert: QuadraticCertificate, sys: LureSystem):
    """Grid specialization of the hull pair with the full-window edges:
    W <= lam * pi (pi + 2 theta' + 2 alpha) and the mirrored bound,
    i.e. slopes -+ lam*pi and intercept lam*pi^2 in X = -2 theta' - 2 alpha."""
    lam = branch_lambdas(cert, sys.c)
    pi = math.pi
    return (-lam * pi, lam * pi ** 2), (lam * pi, lam * pi ** 2)


def default_hull_params(cert: QuadraticCertificate, case: PowerCase,
                        c_rows: np.ndarray, alpha: np.ndarray,
                        delta_l: float = math.pi):
    """Window bounds from the case angle-difference limits, clamped into
    the hull theorem's domain and forced to contain 0."""
    lam = branch_lambdas(cert, c_rows)
    return default_hull_params_from(lam, case, alpha, delta_l)


class _VarMap:
    """Named slices into the optimization vector."""

    def __init__(self):
        self.slices = {}
        self.n = 0

    def add(self, name: str, size: int):
        self.slices[name] = slice(self.n, self.n + size)
        self.n += size

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def take(self, z: np.ndarray, name: str) -> np.ndarray:
        return z[self.slices[name]]


def _gen_incidence(case: PowerCase) -> np.ndarray:
    a = np.zeros((case.n_bus, len(case.generators)))
    for k, g in enumerate(case.generators):
        a[case.bus_pos(g.bus), k] = 1.0
    return a


def _flow_blocks(case, y, vm, v_name, th_name, tag, q_name="q_g"):
    """Active/reactive balance blocks for one network variant.

    Active dispatch is shared between variants (mechanical power carries
    over the fault); reactive output re-balances per equilibrium, so the
    post-fault blocks get their own q variables via ``q_name``.
    """
    n = case.n_bus
    ng = len(case.generators)
    a_gen = _gen_incidence(case)
    p_load = case.load_p()
    q_load = case.load_q()
    sv, st = vm[v_name], vm[th_name]
    sp, sq = vm["p_g"], vm[q_name]

    def p_fun(z):
        v, th = z[sv], z[st]
        return a_gen @ z[sp] - p_load - injections_p_all(v, th, y)

    def p_jac(z):
        v, th = z[sv], z[st]
        dp_dth, dp_dv, _, _ = injection_derivatives(v, th, y)
        j = np.zeros((n, vm.n))
        j[:, sp] = a_gen
        j[:, sv] = -dp_dv
        j[:, st] = -dp_dth
        return j

    def q_fun(z):
        v, th = z[sv], z[st]
        return a_gen @ z[sq] - q_load - injections_q_all(v, th, y)

    def q_jac(z):
        v, th = z[sv], z[st]
        _, _, dq_dth, dq_dv = injection_derivatives(v, th, y)
        j = np.zeros((n, vm.n))
        j[:, sq] = a_gen
        j[:, sv] = -dq_dv
        j[:, st] = -dq_dth
        return j

    return [
        ConstraintBlock(f"power-flow-{tag}-p", "eq", p_fun, p_jac, n),
        ConstraintBlock(f"power-flow-{tag}-q", "eq", q_fun, q_jac, n),
    ]


def _limit_blocks(case, y, vm, v_name, th_name, tag):
    """Line loading and branch angle-difference windows."""
    sv, st = vm[v_name], vm[th_name]
    pairs = [(case.bus_pos(br.from_bus), case.bus_pos(br.to_bus), k)
             for k, br in enumerate(case.branches)
             if k in y.in_service and np.isfinite(case.branches[k].s_max)]
    blocks = []
    if pairs:
        def s_fun(z):
            v = z[sv]
            return np.array([
                abs(y.y[i, j]) ** 2 * v[i] ** 2 * v[j] ** 2
                - case.branches[k].s_max for i, j, k in pairs])

        def s_jac(z):
            v = z[sv]
            j = np.zeros((len(pairs), vm.n))
            for r, (a, b, k) in enumerate(pairs):
                y2 = abs(y.y[a, b]) ** 2
                j[r, sv.start + a] = 2.0 * y2 * v[a] * v[b] ** 2
                j[r, sv.start + b] = 2.0 * y2 * v[a] ** 2 * v[b]
            return j

        blocks.append(ConstraintBlock(f"line-limits-{tag}", "ineq",
                                      s_fun, s_jac, len(pairs)))

    br_pairs = [(case.bus_pos(br.from_bus), case.bus_pos(br.to_bus))
                for k, br in enumerate(case.branches) if k in y.in_service]
    lo, hi = case.limits.angle_min, case.limits.angle_max
    m = len(br_pairs)

    def a_fun(z):
        th = z[st]
        d = np.array([th[i] - th[j] for i, j in br_pairs])
        return np.concatenate([d - hi, lo - d])

    def a_jac(z):
        j = np.zeros((2 * m, vm.n))
        for r, (i, jj) in enumerate(br_pairs):
            j[r, st.start + i] = 1.0
            j[r, st.start + jj] = -1.0
            j[m + r, st.start + i] = -1.0
            j[m + r, st.start + jj] = 1.0
        return j

    blocks.append(ConstraintBlock(f"angle-limits-{tag}", "ineq",
                                  a_fun, a_jac, 2 * m))
    return blocks


def _bounds_and_start(case, vm, restores):
    lb = np.full(vm.n, -np.inf)
    ub = np.full(vm.n, np.inf)
    x0 = np.zeros(vm.n)
    lim = case.limits
    for k, g in enumerate(case.generators):
        lb[vm["p_g"].start + k] = g.p_min
        ub[vm["p_g"].start + k] = g.p_max
        lb[vm["q_g"].start + k] = g.q_min
        ub[vm["q_g"].start + k] = g.q_max
        if "q_g2" in vm.slices:
            lb[vm["q_g2"].start + k] = g.q_min
            ub[vm["q_g2"].start + k] = g.q_max
        x0[vm["p_g"].start + k] = (g.p_set if g.p_set is not None
                                   else 0.5 * (g.p_min + g.p_max))
    slack = case.slack_position
    names = ["v", "th"] if restores else ["v", "th", "v2", "th2"]
    for vn, tn in (names[:2],) if restores else (names[:2], names[2:]):
        sv, st = vm[vn], vm[tn]
        for b in range(case.n_bus):
            if case.buses[b].kind == INFINITE:
                vset = 1.0
                g = case.generator_at(b)
                if g is not None:
                    vset = g.v_set
                lb[sv.start + b] = ub[sv.start + b] = vset
                x0[sv.start + b] = vset
            else:
                lb[sv.start + b] = lim.v_min
                ub[sv.start + b] = lim.v_max
                x0[sv.start + b] = 1.0
        lb[st.start + slack] = ub[st.start + slack] = 0.0
    return lb, ub, x0


def build_opf(case: PowerCase, y=None) -> NlpProblem:
    """Economic dispatch over the steady-state network constraints."""
    from .gridcase import build_admittance
    y = y or build_admittance(case, "base")
    vm = _VarMap()
    ng = len(case.generators)
    vm.add("p_g", ng)
    vm.add("q_g", ng)
    vm.add("v", case.n_bus)
    vm.add("th", case.n_bus)
    a1 = np.array([g.a1 for g in case.generators])
    a2 = np.array([g.a2 for g in case.generators])

    def objective(z):
        p = z[vm["p_g"]]
        return float(np.sum(a1 * p ** 2 + a2 * p))

    def gradient(z):
        g = np.zeros(vm.n)
        p = z[vm["p_g"]]
        g[vm["p_g"]] = 2.0 * a1 * p + a2
        return g

    blocks = _flow_blocks(case, y, vm, "v", "th", "pre")
    blocks += _limit_blocks(case, y, vm, "v", "th", "pre")
    lb, ub, x0 = _bounds_and_start(case, vm, restores=True)
    return NlpProblem(n=vm.n, lb=lb, ub=ub, objective=objective,
                      gradient=gradient, blocks=blocks, x0=x0,
                      meta={"vm": vm, "kind": "opf"})


def _xtc_value(case, scen, order, z, vm, th_post_name):
    """Fault-cleared state value only, on plain arrays (cheap path)."""
    mask = np.ones(case.n_bus)
    for pos in scen.override_positions:
        mask[pos] = 0.0
    a_gen = _gen_incidence(case)
    p_gen = (a_gen @ z[vm["p_g"]]) * mask
    p_load = case.load_p() * mask
    D, W = taylor_series_coeffs(case, scen, order, p_gen, p_load,
                                z[vm["v"]], z[vm["th"]].copy())
    tc = scen.t_clear
    delta = sum(D[n] * tc ** n for n in range(order + 1))
    omega = sum(W[n] * tc ** n for n in range(1, order + 1))
    dyn = case.gen_positions + case.load_positions
    val = np.concatenate([delta[dyn], omega])
    val[: len(dyn)] -= z[vm[th_post_name]][dyn]
    return val


def _xtc_jet(case, scen, order, z, vm, th_post_name):
    """Fault-cleared state [delta(tc)[dyn] - th'; omega_dev(tc)] as value
    and Jacobian wrt the optimization vector, by running the fault-on
    series recursion on derivative-carrying jets."""
    nz = vm.n
    a_gen = _gen_incidence(case)
    p_gen_val = a_gen @ z[vm["p_g"]]
    p_gen_jac = np.zeros((case.n_bus, nz))
    p_gen_jac[:, vm["p_g"]] = a_gen
    mask = np.ones(case.n_bus)
    for pos in scen.override_positions:
        mask[pos] = 0.0
    p_gen = ad.Jet(p_gen_val, p_gen_jac) * mask
    p_load = ad.Jet.constant(case.load_p() * mask, nz)

    sv, st = vm["v"], vm["th"]
    v_jet = ad.Jet(z[sv], np.eye(nz)[sv])
    th_jet = ad.Jet(z[st], np.eye(nz)[st])

    D, W = taylor_series_coeffs(case, scen, order, p_gen, p_load, v_jet, th_jet)
    tc = scen.t_clear
    delta = D[0]
    for n in range(1, order + 1):
        delta = delta + D[n] * (tc ** n)
    omega = W[1] * tc
    for n in range(2, order + 1):
        omega = omega + W[n] * (tc ** n)
    dyn = case.gen_positions + case.load_positions
    val = np.concatenate([delta.val[dyn], omega.val])
    jac = np.vstack([delta.jac[dyn], omega.jac])
    # subtract the post-fault equilibrium angles (variables)
    stp = vm[th_post_name]
    val[: len(dyn)] -= z[stp][dyn]
    for r, pos in enumerate(dyn):
        jac[r, stp.start + pos] -= 1.0
    return val, jac


def build_tscopf(case: PowerCase, scen: FaultScenario,
                 cert: QuadraticCertificate, variant: str = "inner",
                 epsilon: float = 1e-4, taylor_order: int = 3,
                 use_closed_form: bool = False,
                 delta_l: float = math.pi) -> NlpProblem:
    """Stability-constrained dispatch for a fault scenario.

    Adds to the plain dispatch model: post-fault network constraints
    (omitted when the topology restores), the fault-cleared state tied to
    the order-N series of the fault-on flow, the invariant-set energy cap,
    and the per-branch Wmin upper bounds of the chosen variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}'")
    from .gridcase import build_admittance
    y = scen.y_base
    y_post = scen.y_post
    restores = scen.restores_topology

    # per-branch rows of C over the post-fault topology (dynamic buses)
    gen_pos = case.gen_positions
    load_pos = case.load_positions
    dyn = gen_pos + load_pos
    dyn_of_pos = {p: k for k, p in enumerate(dyn)}
    n_state = len(dyn) + len(gen_pos)
    pairs = [(case.bus_pos(case.branches[k].from_bus),
              case.bus_pos(case.branches[k].to_bus))
             for k in y_post.in_service]
    n_br = len(pairs)
    c_rows = np.zeros((n_br, n_state))
    for r, (i, j) in enumerate(pairs):
        if i in dyn_of_pos:
            c_rows[r, dyn_of_pos[i]] = 1.0
        if j in dyn_of_pos:
            c_rows[r, dyn_of_pos[j]] = -1.0
    alpha = y_post.branch_alpha

    if cert.u.shape[0] != n_state or len(cert.beta) != n_br:
        raise CertificateMismatch(
            "certificate/topology hash mismatch: certificate dimensions do "
            "not fit the scenario's post-fault topology")

    vm = _VarMap()
    ng = len(case.generators)
    vm.add("p_g", ng)
    vm.add("q_g", ng)
    vm.add("v", case.n_bus)
    vm.add("th", case.n_bus)
    if not restores:
        vm.add("q_g2", ng)
        vm.add("v2", case.n_bus)
        vm.add("th2", case.n_bus)
    vm.add("x_tc", n_state)
    vm.add("w", 1)
    th_post = "th" if restores else "th2"
    v_post = "v" if restores else "v2"

    # the w variable is optimized in units of the typical bound magnitude;
    # natural value is w_scale * z[w]
    lam_all = branch_lambdas(cert, c_rows)
    w_scale = float(max(1.0, np.median(lam_all) * delta_l ** 2))

    a1 = np.array([g.a1 for g in case.generators])
    a2 = np.array([g.a2 for g in case.generators])

    def objective(z):
        p = z[vm["p_g"]]
        return float(np.sum(a1 * p ** 2 + a2 * p)
                     - epsilon * w_scale * z[vm["w"]][0])

    def gradient(z):
        g = np.zeros(vm.n)
        p = z[vm["p_g"]]
        g[vm["p_g"]] = 2.0 * a1 * p + a2
        g[vm["w"]] = -epsilon * w_scale
        return g

    blocks = _flow_blocks(case, y, vm, "v", "th", "pre")
    blocks += _limit_blocks(case, y, vm, "v", "th", "pre")
    if not restores:
        blocks += _flow_blocks(case, y_post, vm, "v2", "th2", "post",
                               q_name="q_g2")
        blocks += _limit_blocks(case, y_post, vm, "v2", "th2", "post")

    # fault-cleared state: x_tc - T(p_g, v, th; th') = 0
    if use_closed_form:
        closed_eval = _xtc_closed_eval(case, scen, vm, th_post)

        def xtc_value(z):
            return closed_eval(z)[0]

        xtc_eval = closed_eval
    else:
        def xtc_value(z):
            return _xtc_value(case, scen, taylor_order, z, vm, th_post)

        def xtc_eval(z):
            return _xtc_jet(case, scen, taylor_order, z, vm, th_post)

    sx = vm["x_tc"]

    def fc_fun(z):
        return z[sx] - xtc_value(z)

    def fc_jac(z):
        _, jac = xtc_eval(z)
        j = -jac
        j[:, sx] += np.eye(n_state)
        return j

    blocks.append(ConstraintBlock("fault-cleared", "eq", fc_fun, fc_jac,
                                  n_state))

    p_full = cert.p_full

    def cap_fun(z):
        x = z[sx]
        return np.array([(x @ p_full @ x) / w_scale - z[vm["w"]][0]])

    def cap_jac(z):
        j = np.zeros((1, vm.n))
        j[0, sx] = 2.0 * (p_full @ z[sx]) / w_scale
        j[0, vm["w"]] = -1.0
        return j

    blocks.append(ConstraintBlock("energy-cap", "ineq", cap_fun, cap_jac, 1))

    # Wmin upper bounds in the window coordinate X = -2 th'_ij - 2 alpha,
    # rows scaled by 1/w_scale to match the w variable units
    lam = lam_all
    stp = vm[th_post]

    def x_of(z):
        th = z[stp]
        return np.array([-2.0 * (th[i] - th[j]) - 2.0 * alpha[r]
                         for r, (i, j) in enumerate(pairs)])

    dx_dth = np.zeros((n_br, vm.n))
    for r, (i, j) in enumerate(pairs):
        dx_dth[r, stp.start + i] = -2.0
        dx_dth[r, stp.start + j] = 2.0

    if variant == "concave":
        def wb_fun(z):
            x = x_of(z)
            wv = z[vm["w"]][0]
            return np.concatenate([
                wv - lam * (x - delta_l) ** 2 / w_scale,
                wv - lam * (x + delta_l) ** 2 / w_scale])

        def wb_jac(z):
            x = x_of(z)
            j = np.zeros((2 * n_br, vm.n))
            j[:n_br, :] = -(2.0 * lam * (x - delta_l) / w_scale)[:, None] * dx_dth
            j[n_br:, :] = -(2.0 * lam * (x + delta_l) / w_scale)[:, None] * dx_dth
            j[:, vm["w"]] = 1.0
            return j
    else:
        if variant == "hull":
            (s_hi, i_hi), (s_lo, i_lo) = grid_hull_constraints_from(
                lam, delta_l)
        else:
            params = default_hull_params_from(lam, case, alpha, delta_l)
            (s_hi, i_hi), (s_lo, i_lo) = inner_constraints(params)

        def wb_fun(z):
            x = x_of(z)
            wv = z[vm["w"]][0]
            return np.concatenate([
                wv - (s_hi * x + i_hi) / w_scale,
                wv - (s_lo * x + i_lo) / w_scale])

        def wb_jac(z):
            j = np.zeros((2 * n_br, vm.n))
            j[:n_br, :] = -(s_hi / w_scale)[:, None] * dx_dth
            j[n_br:, :] = -(s_lo / w_scale)[:, None] * dx_dth
            j[:, vm["w"]] = 1.0
            return j

    blocks.append(ConstraintBlock("wmin-bounds", "ineq", wb_fun, wb_jac,
                                  2 * n_br))

    lb, ub, x0 = _bounds_and_start(case, vm, restores)
    lb[vm["w"]] = 0.0
    x0[vm["w"]] = 1e-3
    x0[vm["x_tc"]] = x0[vm["x_tc"]] + xtc_value(x0)
    # reactive outputs and w enter every function linearly
    nl_mask = np.ones(vm.n, dtype=bool)
    nl_mask[vm["q_g"]] = False
    if not restores:
        nl_mask[vm["q_g2"]] = False
    nl_mask[vm["w"]] = False
    return NlpProblem(
        n=vm.n, lb=lb, ub=ub, objective=objective, gradient=gradient,
        blocks=blocks, x0=x0,
        meta={"vm": vm, "kind": "tscopf", "variant": variant,
              "epsilon": epsilon, "lam": lam, "alpha": alpha,
              "pairs": pairs, "delta_l": delta_l, "th_post": th_post,
              "restores": restores, "n_branch": n_br,
              "nonlinear_mask": nl_mask, "w_scale": w_scale})


def grid_hull_constraints_from(lam: np.ndarray, delta_l: float):
    """Hull pair with the full window edges x_hi = dl, x_lo = -dl (the
    grid-verbatim numerators pi(pi -+ 2 theta' -+ 2 alpha))."""
    pi = delta_l
    return (-lam * pi, lam * pi ** 2), (lam * pi, lam * pi ** 2)


def default_hull_params_from(lam, case, alpha, delta_l):
    x_lo_raw = -2.0 * case.limits.angle_max - 2.0 * alpha
    x_hi_raw = -2.0 * case.limits.angle_min - 2.0 * alpha
    tl = 2.0 * delta_l
    x_lo = np.minimum(0.0, np.maximum(-tl, x_lo_raw))
    x_hi = np.maximum(0.0, np.minimum(tl, x_hi_raw))
    return HullParams(x_lo=x_lo, x_hi=x_hi, delta_l=delta_l, lam=lam,
                      clamped=bool(np.any(x_lo != x_lo_raw)
                                   or np.any(x_hi != x_hi_raw)))


def _xtc_closed_eval(case, scen, vm, th_post_name):
    """Closed-form fault-cleared map with analytic derivatives."""
    from .fault import k_vector
    from .powerflow import SteadyState

    gen_pos = case.gen_positions
    load_pos = case.load_positions
    dyn = gen_pos + load_pos
    tc = scen.t_clear
    dg, db = (scen.dg_pre, scen.db_pre) if scen.delta_ref == "pre" \
        else (scen.dg_post, scen.db_post)

    coef = np.zeros(case.n_bus)
    wcoef = np.zeros(len(gen_pos))
    for r, pos in enumerate(gen_pos):
        m, d = case.inertia(pos), case.damping(pos)
        coef[pos] = -d * tc ** 2 / (2.0 * m)
        wcoef[r] = d * tc ** 2 / (2.0 * m ** 2) - tc / m
    for pos in load_pos:
        coef[pos] = -(2.0 + tc ** 2) / (2.0 * case.damping(pos))

    sv, st = vm["v"], vm["th"]
    stp = vm[th_post_name]

    def evaluate(z):
        v, th = z[sv], z[st]
        n = case.n_bus
        dth = th[:, None] - th[None, :]
        vv = v[:, None] * v[None, :]
        kern = db * np.sin(dth) + dg * np.cos(dth)
        k = np.sum(vv * kern, axis=1)
        # dK_i/dth_j = -v_i v_j (db cos - dg sin), diagonal by row balance
        kern_th = vv * (db * np.cos(dth) - dg * np.sin(dth))
        np.fill_diagonal(kern_th, 0.0)
        dk_th = -kern_th
        np.fill_diagonal(dk_th, kern_th.sum(axis=1))
        # dK_i/dV_j = v_i kern_ij (j != i), plus the row sum on the diagonal
        dk_v2 = v[:, None] * kern
        np.fill_diagonal(dk_v2, dk_v2.diagonal() + kern @ v)
        delta = th[dyn] + coef[dyn] * k[dyn]
        omega_dev = wcoef * k[gen_pos]
        val = np.concatenate([delta - z[stp][dyn], omega_dev])
        jac = np.zeros((len(val), vm.n))
        for r, pos in enumerate(dyn):
            jac[r, st.start + pos] += 1.0
            jac[r, st] += coef[pos] * dk_th[pos]
            jac[r, sv] += coef[pos] * dk_v2[pos]
            jac[r, stp.start + pos] -= 1.0
        for r, pos in enumerate(gen_pos):
            rr = len(dyn) + r
            jac[rr, st] += wcoef[r] * dk_th[pos]
            jac[rr, sv] += wcoef[r] * dk_v2[pos]
        return val, jac

    return evaluate


def solve_opf(case: PowerCase, opts: NlpOptions | None = None) -> OptSolution:
    return solve_nlp(build_opf(case), opts)


def default_epsilon(f_opf: float) -> float:
    return DEFAULT_EPSILON_SCALE * max(1.0, abs(f_opf))


def solve_tscopf(case: PowerCase, scen: FaultScenario,
                 cert: QuadraticCertificate, variant: str = "inner",
                 epsilon: float | None = None, taylor_order: int = 3,
                 use_closed_form: bool = False, n_starts: int = 3,
                 seed: int = 42, opts: NlpOptions | None = None):
    """Multistart solve: warm start from the plain dispatch optimum, a
    flat start, and a perturbed warm start.  Returns (solution, problem,
    opf_solution)."""
    opf_sol = solve_opf(case, opts)
    eps = default_epsilon(opf_sol.f) if epsilon is None else epsilon
    problem = build_tscopf(case, scen, cert, variant=variant, epsilon=eps,
                           taylor_order=taylor_order,
                           use_closed_form=use_closed_form)
    vm = problem.meta["vm"]
    starts = []
    if opf_sol.status == "Optimal":
        warm = problem.x0.copy()
        opf_vm = _VarMap()
        ng = len(case.generators)
        opf_vm.add("p_g", ng)
        opf_vm.add("q_g", ng)
        opf_vm.add("v", case.n_bus)
        opf_vm.add("th", case.n_bus)
        for name in ("p_g", "q_g", "v", "th"):
            warm[vm[name]] = opf_sol.x[opf_vm[name]]
        if not problem.meta["restores"]:
            warm[vm["q_g2"]] = opf_sol.x[opf_vm["q_g"]]
            warm[vm["v2"]] = opf_sol.x[opf_vm["v"]]
            warm[vm["th2"]] = opf_sol.x[opf_vm["th"]]
        starts.append(warm)
    starts.append(problem.x0.copy())
    rng = np.random.default_rng(seed)
    if starts:
        pert = starts[0].copy()
        pert += 0.02 * rng.standard_normal(len(pert)) * np.maximum(
            1.0, np.abs(pert))
        pert = np.clip(pert, problem.lb, problem.ub)
        starts.append(pert)
    best = None
    for s in starts[:n_starts]:
        prob_s = NlpProblem(n=problem.n, lb=problem.lb, ub=problem.ub,
                            objective=problem.objective,
                            gradient=problem.gradient, blocks=problem.blocks,
                            x0=s, meta=problem.meta)
        sol = solve_nlp(prob_s, opts)
        if sol.status == "Optimal" and (best is None or sol.f < best.f):
            best = sol
        elif best is None:
            best = sol
    return best, problem, opf_sol


def wmin_value(solution: OptSolution, problem: NlpProblem) -> float:
    """Wmin at a solution, in natural (unscaled) units."""
    vm = problem.meta["vm"]
    return float(solution.x[vm["w"]][0] * problem.meta.get("w_scale", 1.0))


def wmin_bound_slacks(solution: OptSolution, problem: NlpProblem) -> np.ndarray:
    """Natural-unit slacks of the Wmin upper bounds at a solution; the
    smallest should be ~0 by the -eps Wmin push."""
    scale = problem.meta.get("w_scale", 1.0)
    for b in problem.blocks:
        if b.name == "wmin-bounds":
            return -np.asarray(b.fun(solution.x)) * scale
    raise ValueError("problem has no wmin-bounds block")


def verify_theorem1(solution: OptSolution, problem: NlpProblem,
                    tol_factor: float = 1e-5) -> dict:
    """At a stability-constrained optimum the smallest Wmin upper bound
    must be active: Wmin equals the lower-level minimum over the chosen
    bounding family, so the single-level solution solves the bilevel model."""
    w = wmin_value(solution, problem)
    slacks = wmin_bound_slacks(solution, problem)
    min_slack = float(np.min(slacks))
    bound = tol_factor * max(w, 1e-12)
    return {
        "w_min": w,
        "min_slack": min_slack,
        "binding": bool(min_slack <= bound),
        "slacks": slacks.tolist(),
        "tolerance": bound,
    }


def verify_theorem2(params: HullParams, n_samples: int = 10_000,
                    seed: int = 42) -> dict:
    """Geometry checks for the hull pair: (a) sampled containment of the
    concave set in the hull, (b) hull vertices written as convex
    combinations of boundary points of the concave set, (c) sampled
    containment of the inner approximation in the concave set."""
    rng = np.random.default_rng(seed)
    (h_s_hi, h_i_hi), (h_s_lo, h_i_lo) = hull_constraints(params)
    (n_s_hi, n_i_hi), (n_s_lo, n_i_lo) = inner_constraints(params)
    m = len(params.lam)
    dl = params.delta_l
    hull_viol = 0
    inner_viol = 0
    for k in range(m):
        xs = rng.uniform(params.x_lo[k], params.x_hi[k], size=n_samples // m + 1)
        psi = params.lam[k] * np.minimum((xs - dl) ** 2, (xs + dl) ** 2)
        ws = rng.uniform(0.0, psi)
        hull = np.minimum(h_s_hi[k] * xs + h_i_hi[k], h_s_lo[k] * xs + h_i_lo[k])
        hull_viol += int(np.sum(ws > hull + 1e-12))
        inner = np.minimum(n_s_hi[k] * xs + n_i_hi[k], n_s_lo[k] * xs + n_i_lo[k])
        inn_ok = ws <= inner + 1e-12
        inner_viol += int(np.sum(inn_ok & (ws > psi + 1e-12)))

    vertices = []
    for k in range(m):
        lamk, xlo, xhi = params.lam[k], params.x_lo[k], params.x_hi[k]
        s1 = (0.0, lamk * dl ** 2)
        s2 = (xhi, lamk * (xhi - dl) ** 2)
        s3 = (xlo, lamk * (xlo + dl) ** 2)
        s4 = (xhi, 0.0)
        s5 = (xlo, 0.0)
        # each hull vertex as c * pa + (1 - c) * pb over boundary points
        # of the concave set; c comes from whichever coordinate separates
        # the anchors
        for vert, (pa, pb) in (
                (s1, (s1, s2)), (s2, (s1, s2)), (s3, (s3, s1)),
                (s4, (s4, s2)), (s5, (s5, s3))):
            span_x = pb[0] - pa[0]
            span_w = pb[1] - pa[1]
            if abs(span_x) > 1e-15:
                cof = (pb[0] - vert[0]) / span_x
            elif abs(span_w) > 1e-15:
                cof = (pb[1] - vert[1]) / span_w
            else:
                cof = 1.0
            err = max(abs(cof * pa[0] + (1 - cof) * pb[0] - vert[0]),
                      abs(cof * pa[1] + (1 - cof) * pb[1] - vert[1]))
            vertices.append({
                "branch": k,
                "vertex": [float(vert[0]), float(vert[1])],
                "coefficient": float(cof),
                "combo_error": float(err),
                "in_unit_interval": bool(-1e-9 <= cof <= 1.0 + 1e-9),
            })
    return {
        "hull_containment_violations": hull_viol,
        "inner_containment_violations": inner_viol,
        "n_samples": n_samples,
        "vertices": vertices,
        "all_vertices_ok": all(v["in_unit_interval"]
                               and v["combo_error"] <= 1e-9 for v in vertices),
    }


def verify_epsilon_insensitivity(case: PowerCase, scen: FaultScenario,
                                 cert: QuadraticCertificate,
                                 variant: str = "inner",
                                 scales=(1e-3, 1e-4, 1e-5),
                                 opts: NlpOptions | None = None) -> dict:
    """Solve the stability-constrained model at decreasing objective
    perturbations; the dispatch/cost spread must shrink with epsilon."""
    opf = solve_opf(case, opts)
    base = max(1.0, abs(opf.f))
    runs = []
    for sc in scales:
        sol, prob, _ = solve_tscopf(case, scen, cert, variant=variant,
                                    epsilon=sc * base, opts=opts)
        vm = prob.meta["vm"]
        runs.append({
            "epsilon": sc * base,
            "status": sol.status,
            "f": float(np.sum(
                np.array([g.a1 for g in case.generators])
                * sol.x[vm["p_g"]] ** 2
                + np.array([g.a2 for g in case.generators])
                * sol.x[vm["p_g"]])),
            "dispatch": sol.x[vm["p_g"]].tolist(),
        })
    spreads = [abs(runs[i]["f"] - runs[i + 1]["f"])
               for i in range(len(runs) - 1)]
    disp = [float(np.max(np.abs(np.array(runs[i]["dispatch"])
                                - np.array(runs[i + 1]["dispatch"]))))
            for i in range(len(runs) - 1)]
    return {
        "runs": runs,
        "f_spreads": spreads,
        "dispatch_spreads": disp,
        "shrinking": bool(all(spreads[i + 1] <= spreads[i] + 1e-12
                              for i in range(len(spreads) - 1))),
    }
