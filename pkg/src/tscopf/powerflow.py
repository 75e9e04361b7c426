"""Steady-state power flow: injections, residuals, Jacobian, Newton solve.

Unknowns are bus angles (all buses except the slack) and voltage
magnitudes at load buses.  Generator and infinite buses hold their
voltage setpoints (PV treatment); the slack bus is the infinite bus when
one exists, else the first generator bus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridcase import GENERATOR, LOAD, AdmittanceMatrix, PowerCase


class NonConvergence(RuntimeError):
    """Newton iteration failed to reach the residual tolerance."""


class SingularJacobian(RuntimeError):
    """Newton step could not be computed."""


@dataclass(frozen=True)
class SteadyState:
    """Per-bus voltage magnitudes (per-unit) and angles (radians)."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        if self.v.shape != self.theta.shape:
            raise ValueError("voltage and angle dimensions differ")


@dataclass(frozen=True)
class Injections:
    """Specified net active/reactive injection per bus (gen minus load)."""

    p: np.ndarray
    q: np.ndarray


def nominal_injections(case: PowerCase) -> Injections:
    """Injections from each generator's p_set against the case loads."""
    p = -case.load_p()
    q = -case.load_q()
    for g in case.generators:
        if g.p_set is not None:
            p[case.bus_pos(g.bus)] += g.p_set
    return Injections(p=p, q=q)


def dispatch_injections(case: PowerCase, p_gen: np.ndarray,
                        q_gen: np.ndarray | None = None) -> Injections:
    """Injections from a dispatch vector ordered like case.generators."""
    p = -case.load_p()
    q = -case.load_q()
    for g, pg in zip(case.generators, p_gen):
        p[case.bus_pos(g.bus)] += pg
    if q_gen is not None:
        for g, qg in zip(case.generators, q_gen):
            q[case.bus_pos(g.bus)] += qg
    return Injections(p=p, q=q)


def injections_p_all(v: np.ndarray, theta: np.ndarray,
                     y: AdmittanceMatrix) -> np.ndarray:
    """g^p at every bus: V_i sum_j V_j (G cos th_ij + B sin th_ij)."""
    dth = theta[:, None] - theta[None, :]
    vv = v[:, None] * v[None, :]
    return np.sum(vv * (y.g * np.cos(dth) + y.b * np.sin(dth)), axis=1)


def injections_q_all(v: np.ndarray, theta: np.ndarray,
                     y: AdmittanceMatrix) -> np.ndarray:
    dth = theta[:, None] - theta[None, :]
    vv = v[:, None] * v[None, :]
    return np.sum(vv * (y.g * np.sin(dth) - y.b * np.cos(dth)), axis=1)


def injection_p(state: SteadyState, y: AdmittanceMatrix, i: int) -> float:
    """Active injection absorbed by the network at bus position i."""
    return float(injections_p_all(state.v, state.theta, y)[i])


def injection_q(state: SteadyState, y: AdmittanceMatrix, i: int) -> float:
    return float(injections_q_all(state.v, state.theta, y)[i])


def line_flow_sq(state: SteadyState, y: AdmittanceMatrix, case: PowerCase,
                 branch: int) -> float:
    """Squared line loading |Y_ij|^2 V_i^2 V_j^2 for a branch."""
    br = case.branches[branch]
    i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
    return float(abs(y.y[i, j]) ** 2 * state.v[i] ** 2 * state.v[j] ** 2)


def _unknowns(case: PowerCase):
    slack = case.slack_position
    ang_idx = [k for k in range(case.n_bus) if k != slack]
    mag_idx = case.load_positions
    return slack, ang_idx, mag_idx


def pf_residual(state: SteadyState, case: PowerCase, inj: Injections,
                y: AdmittanceMatrix) -> np.ndarray:
    """Stacked mismatch: active for non-slack buses, reactive for loads."""
    _, ang_idx, mag_idx = _unknowns(case)
    p_mis = inj.p - injections_p_all(state.v, state.theta, y)
    q_mis = inj.q - injections_q_all(state.v, state.theta, y)
    return np.concatenate([p_mis[ang_idx], q_mis[mag_idx]])


def injection_derivatives(v: np.ndarray, theta: np.ndarray,
                          y: AdmittanceMatrix):
    """Full dense derivatives of (g^p, g^q) wrt (theta, V).

    Returns (dp_dth, dp_dv, dq_dth, dq_dv), each (n, n).
    """
    dth = theta[:, None] - theta[None, :]
    cs, sn = np.cos(dth), np.sin(dth)
    gc_bs = y.g * cs + y.b * sn      # in g^p terms
    gs_bc = y.g * sn - y.b * cs      # in g^q terms
    vv = v[:, None] * v[None, :]

    dp_dth = vv * gs_bc
    np.fill_diagonal(dp_dth, 0.0)
    np.fill_diagonal(dp_dth, -dp_dth.sum(axis=1))
    dq_dth = -vv * gc_bs
    np.fill_diagonal(dq_dth, 0.0)
    np.fill_diagonal(dq_dth, -dq_dth.sum(axis=1))

    dp_dv = v[:, None] * gc_bs
    np.fill_diagonal(dp_dv, dp_dv.diagonal() + (gc_bs * v[None, :]).sum(axis=1))
    dq_dv = v[:, None] * gs_bc
    np.fill_diagonal(dq_dv, dq_dv.diagonal() + (gs_bc * v[None, :]).sum(axis=1))
    return dp_dth, dp_dv, dq_dth, dq_dv


def pf_jacobian(state: SteadyState, case: PowerCase,
                y: AdmittanceMatrix) -> np.ndarray:
    """Dense d(residual)/d(theta_nonslack, V_load)."""
    dp_dth, dp_dv, dq_dth, dq_dv = injection_derivatives(state.v, state.theta, y)
    slack, ang_idx, mag_idx = _unknowns(case)
    rows_p, rows_q = ang_idx, mag_idx
    # residual = spec - g, so the Jacobian carries a minus sign
    j11 = -dp_dth[np.ix_(rows_p, ang_idx)]
    j12 = -dp_dv[np.ix_(rows_p, mag_idx)]
    j21 = -dq_dth[np.ix_(rows_q, ang_idx)]
    j22 = -dq_dv[np.ix_(rows_q, mag_idx)]
    return np.block([[j11, j12], [j21, j22]])


def solve_pf(case: PowerCase, inj: Injections, y: AdmittanceMatrix,
             v_set: np.ndarray | None = None, tol: float = 1e-8,
             max_iter: int = 50, warm: SteadyState | None = None) -> SteadyState:
    """Newton power flow with step-halving damping.

    Starts flat (V = setpoints, theta = 0) unless ``warm`` supplies an
    initial state.  Raises NonConvergence after the iteration cap,
    SingularJacobian if a step cannot be computed.
    """
    slack, ang_idx, mag_idx = _unknowns(case)
    if warm is not None:
        v = warm.v.copy()
        th = warm.theta.copy()
    else:
        v = case.v_setpoints() if v_set is None else v_set.copy()
        for k in mag_idx:
            v[k] = 1.0
        th = np.zeros(case.n_bus)
    state = SteadyState(v=v, theta=th)
    r = pf_residual(state, case, inj, y)
    best = float(np.max(np.abs(r))) if r.size else 0.0
    for _ in range(max_iter):
        if best <= tol:
            return state
        jac = pf_jacobian(state, case, y)
        try:
            dx = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            raise SingularJacobian("power flow Jacobian is singular") from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("power flow step is not finite")
        # damped update: halve on residual increase, up to 8 times
        step = 1.0
        for _h in range(9):
            v_new = state.v.copy()
            th_new = state.theta.copy()
            th_new[ang_idx] += step * dx[: len(ang_idx)]
            v_new[mag_idx] += step * dx[len(ang_idx):]
            cand = SteadyState(v=v_new, theta=th_new)
            r_new = pf_residual(cand, case, inj, y)
            norm_new = float(np.max(np.abs(r_new)))
            if norm_new < best or step <= 1.0 / 256:
                break
            step *= 0.5
        state, r, best = cand, r_new, norm_new
    if best <= tol:
        return state
    raise NonConvergence(
        f"power flow not converged: max residual {best:.3e} after {max_iter} iterations")


def solve_pf_ramped(case: PowerCase, inj: Injections, y: AdmittanceMatrix,
                    tol: float = 1e-8, warm: SteadyState | None = None,
                    stages=(0.25, 0.5, 0.7, 0.85, 1.0)) -> SteadyState:
    """solve_pf with an injection-ramp fallback for stressed cases whose
    flat-start Newton basin is too small."""
    try:
        return solve_pf(case, inj, y, tol=tol, warm=warm)
    except NonConvergence:
        pass
    state = warm
    for lam in stages:
        scaled = Injections(p=inj.p * lam, q=inj.q * lam)
        state = solve_pf(case, scaled, y, tol=tol, warm=state, max_iter=80)
    return state
