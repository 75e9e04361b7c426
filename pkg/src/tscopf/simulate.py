"""Fixed-step RK4 integration of the network-preserving angle dynamics.

Serves as the ground-truth oracle for Taylor-series fault-cleared states
and for certificate invariance.  Voltage magnitudes are held at their
phase-appropriate steady-state values (classical first-swing assumption):
pre-fault voltages during the fault window, post-fault voltages after
clearing.  Integration steps land exactly on the phase switching times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .fault import FaultScenario, fault_on_injections, implied_injections
from .gridcase import GENERATOR, LOAD, AdmittanceMatrix, PowerCase
from .lure import LureSystem, x_coords
from .powerflow import SteadyState

BLOWUP_ANGLE = 10.0 * math.pi
QUIESCE_TOL = 1e-2


class Verdict(Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class PhaseParams:
    """Frozen network data for one integration phase."""

    y: AdmittanceMatrix
    v: np.ndarray
    p_gen: np.ndarray
    p_load: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray                 # strictly increasing grid
    delta: np.ndarray             # (n_t, n_dyn) absolute angles
    omega: np.ndarray             # (n_t, n_gen)
    t0: float
    tc: float
    dyn_positions: tuple
    n_gen: int
    w: np.ndarray | None = None
    unstable_flag: bool = field(default=False)

    def x_series(self, sys: LureSystem) -> np.ndarray:
        th_eq = sys.theta_eq_bus[list(self.dyn_positions)]
        return np.hstack([self.delta - th_eq, self.omega - 1.0])

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            wr = csv.writer(f)
            hdr = (["t"]
                   + [f"delta_{p}" for p in self.dyn_positions]
                   + [f"omega_{p}" for p in self.dyn_positions[: self.n_gen]])
            if self.w is not None:
                hdr.append("W")
            wr.writerow(hdr)
            for k in range(len(self.t)):
                row = ([f"{self.t[k]:.6f}"]
                       + [f"{v:.12g}" for v in self.delta[k]]
                       + [f"{v:.12g}" for v in self.omega[k]])
                if self.w is not None:
                    row.append(f"{self.w[k]:.12g}")
                wr.writerow(row)


def _dyn_structure(case: PowerCase):
    gen_pos = case.gen_positions
    load_pos = case.load_positions
    dyn = gen_pos + load_pos
    m = np.array([case.inertia(p) for p in gen_pos])
    d_g = np.array([case.damping(p) for p in gen_pos])
    d_l = np.array([case.damping(p) for p in load_pos])
    return gen_pos, load_pos, dyn, m, d_g, d_l


def rhs(case: PowerCase, params: PhaseParams, delta_full: np.ndarray,
        omega: np.ndarray):
    """Time derivative of (delta_dyn, omega) under the given phase.

    Generator angles follow the speed deviation, load angles the damped
    power imbalance, generator speeds the swing equation.
    """
    gen_pos, load_pos, dyn, m, d_g, d_l = _dyn_structure(case)
    v = params.v
    y = params.y
    dth = delta_full[:, None] - delta_full[None, :]
    vv = v[:, None] * v[None, :]
    gp = np.sum(vv * (y.g * np.cos(dth) + y.b * np.sin(dth)), axis=1)
    ddelta = np.empty(len(dyn))
    ddelta[: len(gen_pos)] = omega - 1.0
    ddelta[len(gen_pos):] = (-params.p_load[load_pos] - gp[load_pos]) / d_l
    domega = (params.p_gen[gen_pos] - gp[gen_pos] - d_g * (omega - 1.0)) / m
    return ddelta, domega


def _rk4_phase(case: PowerCase, params: PhaseParams, delta_full, omega,
               t_start, t_end, h):
    """Integrate one phase with a uniform step that hits t_end exactly."""
    gen_pos, load_pos, dyn, *_ = _dyn_structure(case)
    span = t_end - t_start
    n_steps = max(1, int(math.ceil(span / h - 1e-12)))
    hh = span / n_steps
    ts, ds, ws = [], [], []
    z = np.concatenate([delta_full[dyn], omega])
    static = delta_full.copy()

    def f(zv):
        full = static.copy()
        full[dyn] = zv[: len(dyn)]
        dd, dw = rhs(case, params, full, zv[len(dyn):])
        return np.concatenate([dd, dw])

    for k in range(n_steps):
        k1 = f(z)
        k2 = f(z + 0.5 * hh * k1)
        k3 = f(z + 0.5 * hh * k2)
        k4 = f(z + hh * k3)
        z = z + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ts.append(t_start + (k + 1) * hh)
        ds.append(z[: len(dyn)].copy())
        ws.append(z[len(dyn):].copy())
        if np.max(np.abs(z[: len(dyn)])) > 4.0 * BLOWUP_ANGLE:
            break
    full = static.copy()
    full[dyn] = z[: len(dyn)]
    return ts, ds, ws, full, z[len(dyn):]


def simulate_fault(case: PowerCase, scen: FaultScenario, pre_eq: SteadyState,
                   post_eq: SteadyState, t_end: float, h: float = 1e-3,
                   x0: np.ndarray | None = None) -> Trajectory:
    """Fault-on then post-fault integration from the pre-fault equilibrium
    (or from an explicit absolute initial state [delta_dyn; omega])."""
    gen_pos, load_pos, dyn, *_ = _dyn_structure(case)
    tc = min(scen.t_clear, t_end) if not scen.permanent else t_end
    if t_end < scen.t_clear and not scen.permanent:
        raise ValueError("horizon shorter than the clearing time")

    p_gen, p_load = implied_injections(case, pre_eq, scen.y_base)
    pg_on, pl_on = fault_on_injections(case, scen, p_gen, p_load)
    on = PhaseParams(y=scen.y_on, v=pre_eq.v.copy(), p_gen=pg_on, p_load=pl_on)
    post = PhaseParams(y=scen.y_post, v=post_eq.v.copy(), p_gen=p_gen,
                       p_load=p_load)

    delta_full = pre_eq.theta.copy()
    omega = np.ones(len(gen_pos))
    if x0 is not None:
        delta_full = delta_full.copy()
        delta_full[dyn] = x0[: len(dyn)]
        omega = x0[len(dyn):].copy()

    ts = [0.0]
    ds = [delta_full[dyn].copy()]
    ws = [omega.copy()]
    t1, d1, w1, delta_full, omega = _rk4_phase(case, on, delta_full, omega,
                                               0.0, tc, h)
    ts += t1
    ds += d1
    ws += w1
    if not scen.permanent and tc < t_end:
        t2, d2, w2, delta_full, omega = _rk4_phase(case, post, delta_full,
                                                   omega, tc, t_end, h)
        ts += t2
        ds += d2
        ws += w2
    return Trajectory(t=np.asarray(ts), delta=np.asarray(ds),
                      omega=np.asarray(ws), t0=0.0, tc=tc,
                      dyn_positions=tuple(dyn), n_gen=len(gen_pos))


def simulate_nominal(case: PowerCase, post_eq: SteadyState,
                     y_post: AdmittanceMatrix, x0_dev: np.ndarray,
                     t_end: float, h: float = 1e-3) -> Trajectory:
    """Integrate the nominal post-fault system from a deviation state
    x0_dev = [delta_dyn - theta'; omega - 1]."""
    gen_pos, load_pos, dyn, *_ = _dyn_structure(case)
    p_gen, p_load = implied_injections(case, post_eq, y_post)
    params = PhaseParams(y=y_post, v=post_eq.v.copy(), p_gen=p_gen,
                         p_load=p_load)
    delta_full = post_eq.theta.copy()
    delta_full[dyn] = delta_full[dyn] + x0_dev[: len(dyn)]
    omega = 1.0 + x0_dev[len(dyn):].copy()
    ts = [0.0]
    ds = [delta_full[dyn].copy()]
    ws = [omega.copy()]
    t1, d1, w1, *_ = _rk4_phase(case, params, delta_full, omega, 0.0, t_end, h)
    return Trajectory(t=np.asarray(ts + t1), delta=np.asarray(ds + d1),
                      omega=np.asarray(ws + w1), t0=0.0, tc=0.0,
                      dyn_positions=tuple(dyn), n_gen=len(gen_pos))


def integrate_selfcheck(case, scen, pre_eq, post_eq, t_end, h=1e-3,
                        tol=1e-6) -> Trajectory:
    """Integrate and verify that halving the step moves the endpoint by
    less than ``tol``; raises on violation."""
    traj = simulate_fault(case, scen, pre_eq, post_eq, t_end, h)
    half = simulate_fault(case, scen, pre_eq, post_eq, t_end, h / 2.0)
    err = max(float(np.max(np.abs(traj.delta[-1] - half.delta[-1]))),
              float(np.max(np.abs(traj.omega[-1] - half.omega[-1]))))
    if err > tol:
        raise RuntimeError(f"integration self-check failed: endpoint moved "
                           f"{err:.3e} under step halving")
    return traj


def assess_stability(traj: Trajectory, sys: LureSystem,
                     window: float = 2.0,
                     quiesce_tol: float = QUIESCE_TOL,
                     blowup: float = BLOWUP_ANGLE) -> tuple[Verdict, dict]:
    """Post-clearing verdict: Stable when the trajectory stays inside the
    polytope and the deviation norm over the final window is small and
    decreasing; Unstable on polytope exit or angle blow-up."""
    x = traj.x_series(sys)
    y = x @ sys.c.T
    post = traj.t >= traj.tc - 1e-12
    detail: dict = {}

    dij = y + sys.theta_eq  # absolute branch angle differences
    if np.any(np.abs(dij) > blowup):
        detail["reason"] = "angle separation"
        return Verdict.UNSTABLE, detail
    out = (y[post] < sys.y_lo - 1e-12) | (y[post] > sys.y_hi + 1e-12)
    if np.any(out):
        k = int(np.argmax(np.any(out, axis=1)))
        detail["reason"] = "polytope exit"
        detail["exit_time"] = float(traj.t[post][k])
        return Verdict.UNSTABLE, detail

    t_post = traj.t[post]
    if len(t_post) < 4 or t_post[-1] - traj.tc < window:
        detail["reason"] = "horizon too short"
        return Verdict.INCONCLUSIVE, detail
    tail = t_post >= t_post[-1] - window
    # deviations measured modulo the quotiented uniform-angle mode
    norms = np.max(np.abs(x[post][tail] @ sys.u), axis=1)
    half = len(norms) // 2
    detail["final_norm"] = float(norms.max())
    detail["first_half"] = float(norms[:half].max())
    detail["second_half"] = float(norms[half:].max())
    if norms.max() < quiesce_tol and detail["second_half"] <= detail["first_half"] + 1e-12:
        return Verdict.STABLE, detail
    detail["reason"] = "not quiescent"
    return Verdict.INCONCLUSIVE, detail


def w_along(traj: Trajectory, cert, sys: LureSystem,
            step_tol: float = 1e-9):
    """Annotate the trajectory with W values; report post-clearing steps
    inside the polytope where W increased by more than step_tol."""
    x = traj.x_series(sys)
    w = np.einsum("ij,jk,ik->i", x, cert.p_full, x)
    traj.w = w
    y = x @ sys.c.T
    inside = np.all((y >= sys.y_lo) & (y <= sys.y_hi), axis=1)
    post = traj.t >= traj.tc - 1e-12
    bad = []
    idx = np.where(post)[0]
    for a, b in zip(idx[:-1], idx[1:]):
        if inside[a] and inside[b] and w[b] > w[a] + step_tol:
            bad.append((float(traj.t[a]), float(w[b] - w[a])))
    return w, bad
