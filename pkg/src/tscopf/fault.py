"""Transient disturbances and fault-cleared states by Taylor expansion.

A scenario fixes the fault-on admittance Y'', the post-fault admittance
Y', injection overrides during the fault window, and the clearing time.
The fault-cleared state is the trajectory of the fault-on system at
t_clear, started from the pre-fault equilibrium, expressed in post-fault
deviation coordinates.  Two approximations are provided: the grid
closed forms (generator/load/speed expressions in the disturbance factor
K_i), kept verbatim for comparison, and a generic order-N Taylor series
of the fault-on vector field computed by power-series recursion, which
is the default path for optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad
from .gridcase import (GENERATOR, LOAD, AdmittanceMatrix, CaseError,
                       FaultSpec, PowerCase, build_admittance)
from .powerflow import SteadyState, injections_p_all

T_CLEAR_GUARD = 0.3  # series validity guard, seconds


@dataclass(frozen=True)
class FaultScenario:
    """Fault description with cached admittance variants and deltas."""

    spec: FaultSpec
    y_base: AdmittanceMatrix
    y_on: AdmittanceMatrix
    y_post: AdmittanceMatrix
    dg_pre: np.ndarray       # G'' - G
    db_pre: np.ndarray
    dg_post: np.ndarray      # G'' - G'
    db_post: np.ndarray
    override_positions: tuple
    delta_ref: str = "pre"

    @property
    def t_clear(self) -> float:
        return self.spec.t_clear

    @property
    def permanent(self) -> bool:
        return self.spec.permanent

    @property
    def restores_topology(self) -> bool:
        return np.allclose(self.y_post.y, self.y_base.y)


@dataclass(frozen=True)
class FaultClearedState:
    x: np.ndarray            # [delta(tc) - theta'; omega(tc) - 1]
    method: str
    t_clear: float


def make_scenario(case: PowerCase, spec: FaultSpec, delta_ref: str = "pre",
                  injection_scope: str | None = None) -> FaultScenario:
    """Build admittance variants and delta caches for a fault spec.

    ``injection_scope``: "faulted" zeroes injections only at faulted
    buses during the fault window (line faults have none), "system"
    zeroes all of them, "none" keeps injections untouched.  Defaults to
    the spec's own setting.
    """
    if delta_ref not in ("pre", "post"):
        raise ValueError("delta_ref must be 'pre' or 'post'")
    if injection_scope is None:
        injection_scope = spec.injection_scope
    y_base = build_admittance(case, "base")
    y_on = build_admittance(case, "faulted", spec)
    y_post = build_admittance(case, "postfault", spec)
    if injection_scope == "system":
        override = tuple(range(case.n_bus))
    elif injection_scope == "faulted":
        override = ((case.bus_pos(spec.fault_bus),)
                    if spec.fault_type == "bus_ltg" else ())
    elif injection_scope == "none":
        override = ()
    else:
        raise ValueError(f"unknown injection scope '{injection_scope}'")
    if spec.t_clear <= 0.0:
        raise CaseError("t_clear must be positive")
    return FaultScenario(
        spec=spec, y_base=y_base, y_on=y_on, y_post=y_post,
        dg_pre=y_on.g - y_base.g, db_pre=y_on.b - y_base.b,
        dg_post=y_on.g - y_post.g, db_post=y_on.b - y_post.b,
        override_positions=override, delta_ref=delta_ref)


def _delta_gb(scen: FaultScenario, reference: str | None):
    ref = reference or scen.delta_ref
    if ref == "pre":
        return scen.dg_pre, scen.db_pre
    if ref == "post":
        return scen.dg_post, scen.db_post
    raise ValueError("reference must be 'pre' or 'post'")


def k_vector(pre_eq: SteadyState, scen: FaultScenario,
             reference: str | None = None) -> np.ndarray:
    """K_i = V_i sum_j V_j (dB sin th_ij + dG cos th_ij) at the pre-fault
    equilibrium, for the configured admittance-delta reference."""
    dg, db = _delta_gb(scen, reference)
    dth = pre_eq.theta[:, None] - pre_eq.theta[None, :]
    vv = pre_eq.v[:, None] * pre_eq.v[None, :]
    return np.sum(vv * (db * np.sin(dth) + dg * np.cos(dth)), axis=1)


def k_factor(pre_eq: SteadyState, scen: FaultScenario, i: int,
             reference: str | None = None) -> float:
    return float(k_vector(pre_eq, scen, reference)[i])


def implied_injections(case: PowerCase, pre_eq: SteadyState,
                       y_base: AdmittanceMatrix):
    """Per-bus (p_gen, p_load) consistent with the pre-fault equilibrium.

    The net injection is pinned by the power balance, g^p(V, theta, Y);
    splitting off the case loads recovers the generation including the
    slack's share.
    """
    p_load = case.load_p()
    net = injections_p_all(pre_eq.v, pre_eq.theta, y_base)
    return net + p_load, p_load


def fault_on_injections(case: PowerCase, scen: FaultScenario,
                        p_gen_bus: np.ndarray, p_load_bus: np.ndarray):
    """Apply the fault-window injection overrides (p -> 0 at faulted buses)."""
    pg = p_gen_bus.copy()
    pl = p_load_bus.copy()
    for pos in scen.override_positions:
        pg[pos] = 0.0
        pl[pos] = 0.0
    return pg, pl


def disturbance_term(pre_eq: SteadyState, scen: FaultScenario, i: int,
                     case: PowerCase | None = None) -> float:
    """Net additive power-balance perturbation at bus i during the fault
    window (zero before t0).  The admittance part has magnitude K_i with
    the pre-fault delta reference and enters the balance negatively; the
    injection overrides contribute -p^G at generator buses and +p^L at
    load buses."""
    u = -k_factor(pre_eq, scen, i, reference="pre")
    if case is not None and i in scen.override_positions:
        p_gen, p_load = implied_injections(case, pre_eq, scen.y_base)
        if case.buses[i].kind == GENERATOR:
            u -= p_gen[i]
        elif case.buses[i].kind == LOAD:
            u += p_load[i]
    return u


def _check_guard(t_clear: float) -> None:
    if t_clear > T_CLEAR_GUARD:
        raise ValueError(
            f"t_clear {t_clear} s exceeds the series validity guard "
            f"{T_CLEAR_GUARD} s")


def fault_cleared_closed(case: PowerCase, pre_eq: SteadyState,
                         post_eq: SteadyState,
                         scen: FaultScenario) -> FaultClearedState:
    """Grid closed forms, kept verbatim:

        delta_i(tc) = theta_i - d_i tc^2/(2 m_i) K_i          (generators)
        delta_i(tc) = theta_i - (2 + tc^2)/(2 d_i) K_i        (loads)
        omega_i(tc) = 1 + (d_i tc^2/(2 m_i^2) - tc/m_i) K_i   (generators)

    The load expression carries a tc-independent offset; the generic
    series is the trusted default and this form is retained for
    comparison only.
    """
    tc = scen.t_clear
    _check_guard(tc)
    k = k_vector(pre_eq, scen)
    gen_pos = case.gen_positions
    load_pos = case.load_positions
    dyn = gen_pos + load_pos
    delta = np.empty(len(dyn))
    for r, pos in enumerate(gen_pos):
        m, d = case.inertia(pos), case.damping(pos)
        delta[r] = pre_eq.theta[pos] - d * tc ** 2 / (2.0 * m) * k[pos]
    for r, pos in enumerate(load_pos, start=len(gen_pos)):
        d = case.damping(pos)
        delta[r] = pre_eq.theta[pos] - (2.0 + tc ** 2) / (2.0 * d) * k[pos]
    omega = np.empty(len(gen_pos))
    for r, pos in enumerate(gen_pos):
        m, d = case.inertia(pos), case.damping(pos)
        omega[r] = 1.0 + (d * tc ** 2 / (2.0 * m ** 2) - tc / m) * k[pos]
    th_eq = post_eq.theta[dyn]
    x = np.concatenate([delta - th_eq, omega - 1.0])
    return FaultClearedState(x=x, method="closed-form", t_clear=tc)


def taylor_series_coeffs(case: PowerCase, scen: FaultScenario, order: int,
                         p_gen_bus, p_load_bus, v_bus, theta0,
                         omega0=None):
    """Power-series coefficients of the fault-on trajectory.

    Returns (D, W): lists of per-order coefficients of the full-bus angle
    vector and the generator speed-deviation vector, normalized so that
    delta(t) = sum_n D[n] t^n.  Works on plain arrays or ad.Jet inputs;
    all series products use the classic sin/cos propagation

        s_n = (1/n) sum_k k u_k c_{n-k},   c_n = -(1/n) sum_k k u_k s_{n-k}.
    """
    y = scen.y_on
    gen_pos = case.gen_positions
    load_pos = case.load_positions
    n_bus = case.n_bus
    m_g = np.array([case.inertia(p) for p in gen_pos])
    d_g = np.array([case.damping(p) for p in gen_pos])
    d_l = np.array([case.damping(p) for p in load_pos])
    gen_arr = np.array(gen_pos, dtype=int)
    load_arr = np.array(load_pos, dtype=int)

    ii = np.array([case.bus_pos(case.branches[k].from_bus)
                   for k in y.in_service], dtype=int)
    jj = np.array([case.bus_pos(case.branches[k].to_bus)
                   for k in y.in_service], dtype=int)
    g_br = y.g[ii, jj]
    b_br = y.b[ii, jj]

    D = [theta0]
    W = [omega0 if omega0 is not None
         else ad.zeros_like_template(theta0, (len(gen_pos),))]

    # per-order branch-vector sin/cos series
    u = [ad.gather(theta0, ii) - ad.gather(theta0, jj)]
    s = [ad.sin(u[0])]
    c = [ad.cos(u[0])]
    vivj = ad.gather(v_bus, ii) * ad.gather(v_bus, jj)
    vdiag = (v_bus * v_bus) * np.diag(y.g).copy()

    def gp_order(n):
        """Order-n coefficient of g^p at every bus (n >= 1 skips constants).

        Matrix entries are symmetric, so the reversed orientation only
        flips the sin term."""
        ti = vivj * (g_br * c[n] + b_br * s[n])
        tj = vivj * (g_br * c[n] - b_br * s[n])
        gp = ad.zeros_like_template(theta0, (n_bus,))
        gp = ad.index_add(gp, ii, ti)
        gp = ad.index_add(gp, jj, tj)
        if n == 0:
            gp = gp + vdiag
        return gp

    for n in range(order):
        # order-n coefficient of the field
        gp_n = gp_order(n)
        if n == 0:
            f_load = -(ad.gather(p_load_bus, load_arr)) - ad.gather(gp_n, load_arr)
            f_gen = (ad.gather(p_gen_bus, gen_arr)
                     - ad.gather(gp_n, gen_arr) - W[0] * d_g)
        else:
            f_load = -ad.gather(gp_n, load_arr)
            f_gen = -ad.gather(gp_n, gen_arr) - W[n] * d_g

        d_next = ad.zeros_like_template(theta0, (n_bus,))
        d_next = ad.index_add(d_next, gen_arr, W[n] / (n + 1.0))
        d_next = ad.index_add(d_next, load_arr, f_load / (d_l * (n + 1.0)))
        w_next = f_gen / (m_g * (n + 1.0))
        D.append(d_next)
        W.append(w_next)

        if n + 1 < order:
            # extend the branch angle series and recurse sin/cos
            u.append(ad.gather(D[n + 1], ii) - ad.gather(D[n + 1], jj))
            acc_s = None
            acc_c = None
            for kk in range(1, n + 2):
                ts = (kk * 1.0) * u[kk] * c[n + 1 - kk]
                tc2 = (kk * 1.0) * u[kk] * s[n + 1 - kk]
                acc_s = ts if acc_s is None else acc_s + ts
                acc_c = tc2 if acc_c is None else acc_c + tc2
            s.append(acc_s / (n + 1.0))
            c.append(-(acc_c / (n + 1.0)))
    return D, W


def fault_cleared_taylor(case: PowerCase, pre_eq: SteadyState,
                         post_eq: SteadyState, scen: FaultScenario,
                         order: int = 3) -> FaultClearedState:
    """Order-N series of the fault-on flow from the pre-fault equilibrium."""
    if not 1 <= order <= 4:
        raise ValueError("Taylor order must be within 1..4")
    tc = scen.t_clear
    _check_guard(tc)
    p_gen, p_load = implied_injections(case, pre_eq, scen.y_base)
    p_gen_on, p_load_on = fault_on_injections(case, scen, p_gen, p_load)
    D, W = taylor_series_coeffs(case, scen, order, p_gen_on, p_load_on,
                                pre_eq.v, pre_eq.theta.copy())
    delta = sum(D[n] * tc ** n for n in range(order + 1))
    omega_dev = sum(W[n] * tc ** n for n in range(1, order + 1))
    dyn = case.gen_positions + case.load_positions
    x = np.concatenate([delta[dyn] - post_eq.theta[dyn], omega_dev])
    return FaultClearedState(x=x, method=f"general-taylor-{order}", t_clear=tc)
