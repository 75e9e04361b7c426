"""Reformulation of the swing dynamics into linear-plus-nonlinearity form.

The state is x = [delta_gen - theta'_gen; delta_load - theta'_load;
omega - 1] built on the post-fault network, whose equilibrium is the
origin.  One trigonometric nonlinearity per in-service branch feeds back
through the signed incidence structure:

    xdot = A x + B phi(C x),
    phi_k(y) = kappa_k (sin(y + theta'_k + alpha_k) - sin(theta'_k + alpha_k)).

For grids without an infinite bus a uniform shift of all angles is a
neutral direction of the closed loop (equilibria form a line), so strict
Lyapunov decrease is only possible on its orthogonal complement.  The
system carries a reduction basis U for that complement; certificates are
computed on the reduced matrices and lifted back with a positive
semidefinite P whose kernel is exactly the uniform mode.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from .gridcase import GENERATOR, AdmittanceMatrix, CaseError, PowerCase
from .powerflow import SteadyState


@dataclass(frozen=True)
class SectorBounds:
    """Diagonal slope envelopes [gamma, beta] per branch nonlinearity."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if np.any(self.gamma < 0.0):
            raise ValueError("gamma entries must be nonnegative")
        if np.any(self.gamma >= self.beta):
            raise ValueError("need gamma < beta elementwise")


@dataclass(frozen=True)
class LureSystem:
    a: np.ndarray                      # (n_state, n_state)
    b: np.ndarray                      # (n_state, n_branch)
    c: np.ndarray                      # (n_branch, n_state)
    u: np.ndarray                      # reduction basis (n_state, n_red)
    kappa: np.ndarray                  # per-branch gain V'_i V'_j |Y'_ij|
    alpha: np.ndarray                  # per-branch conductance angle
    theta_eq: np.ndarray               # per-branch equilibrium angle theta'_ij
    y_lo: np.ndarray                   # polytope bounds in x-coordinates
    y_hi: np.ndarray
    branches: tuple                    # (from_pos, to_pos, case_branch_idx)
    dyn_positions: tuple               # case bus positions, generators first
    n_gen: int
    v_eq: np.ndarray                   # full-bus post-fault voltages
    theta_eq_bus: np.ndarray           # full-bus post-fault angles
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_state(self) -> int:
        return self.a.shape[0]

    @property
    def n_dyn(self) -> int:
        return len(self.dyn_positions)

    @property
    def n_branch(self) -> int:
        return self.c.shape[0]

    @property
    def reduced(self) -> bool:
        return self.u.shape[1] != self.u.shape[0]

    @property
    def a_red(self) -> np.ndarray:
        if "a_red" not in self._cache:
            self._cache["a_red"] = self.u.T @ self.a @ self.u
        return self._cache["a_red"]

    @property
    def b_red(self) -> np.ndarray:
        if "b_red" not in self._cache:
            self._cache["b_red"] = self.u.T @ self.b
        return self._cache["b_red"]

    @property
    def c_red(self) -> np.ndarray:
        if "c_red" not in self._cache:
            self._cache["c_red"] = self.c @ self.u
        return self._cache["c_red"]

    def content_hash(self) -> str:
        """Stable hash of the topology-level content, for certificate caching.

        Deliberately excludes the equilibrium-dependent branch parameters:
        a certificate built with voltage-ceiling sectors is valid for every
        admissible equilibrium of the same post-fault topology.
        """
        payload = {
            "a": np.round(self.a, 12).tolist(),
            "b": np.round(self.b, 12).tolist(),
            "c": np.round(self.c, 12).tolist(),
            "alpha": np.round(self.alpha, 12).tolist(),
            "branches": [list(t) for t in self.branches],
            "n_gen": self.n_gen,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "u": self.u.tolist(),
            "kappa": self.kappa.tolist(),
            "alpha": self.alpha.tolist(),
            "theta_eq": self.theta_eq.tolist(),
            "y_lo": self.y_lo.tolist(),
            "y_hi": self.y_hi.tolist(),
            "branches": [list(t) for t in self.branches],
            "dyn_positions": list(self.dyn_positions),
            "n_gen": self.n_gen,
            "v_eq": self.v_eq.tolist(),
            "theta_eq_bus": self.theta_eq_bus.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LureSystem":
        return cls(
            a=np.asarray(d["a"]), b=np.asarray(d["b"]), c=np.asarray(d["c"]),
            u=np.asarray(d["u"]), kappa=np.asarray(d["kappa"]),
            alpha=np.asarray(d["alpha"]), theta_eq=np.asarray(d["theta_eq"]),
            y_lo=np.asarray(d["y_lo"]), y_hi=np.asarray(d["y_hi"]),
            branches=tuple(tuple(t) for t in d["branches"]),
            dyn_positions=tuple(d["dyn_positions"]), n_gen=int(d["n_gen"]),
            v_eq=np.asarray(d["v_eq"]),
            theta_eq_bus=np.asarray(d["theta_eq_bus"]),
        )


def build_lure(case: PowerCase, post_eq: SteadyState, y_post: AdmittanceMatrix,
               polytope: str = "shifted") -> LureSystem:
    """Assemble the feedback system for the post-fault network.

    ``polytope`` selects the branch-angle excursion window in
    x-coordinates: "shifted" uses [-pi - 2 theta' - 2 alpha,
    pi - 2 theta' - 2 alpha] (the window over which the designed sectors
    are valid), "symmetric" uses [-pi, pi].
    """
    gen_pos = case.gen_positions
    load_pos = case.load_positions
    if not gen_pos:
        raise CaseError("dynamics undefined: case has no generator bus")
    dyn = gen_pos + load_pos
    n_gen, n_dyn = len(gen_pos), len(dyn)
    n_state = n_dyn + n_gen
    dyn_of_pos = {p: k for k, p in enumerate(dyn)}

    m_vec = np.array([case.inertia(p) for p in gen_pos])
    d_gen = np.array([case.damping(p) for p in gen_pos])
    d_load = np.array([case.damping(p) for p in load_pos])
    if np.any(m_vec <= 0.0) or np.any(d_gen <= 0.0) or np.any(d_load <= 0.0):
        raise CaseError("singular dynamics: nonpositive inertia or damping")

    # A: block rows over (delta_gen, delta_load, omega)
    a = np.zeros((n_state, n_state))
    a[:n_gen, n_dyn:] = np.eye(n_gen)
    a[n_dyn:, n_dyn:] = -np.diag(d_gen / m_vec)

    branches = []
    for idx_b, k in enumerate(y_post.in_service):
        br = case.branches[k]
        branches.append((case.bus_pos(br.from_bus), case.bus_pos(br.to_bus), k))
    n_br = len(branches)

    # signed incidence restricted to dynamic buses; rows with a static end
    # keep a single entry (the static angle equals its equilibrium value)
    e_dyn = np.zeros((n_br, n_dyn))
    for r, (i, j, _k) in enumerate(branches):
        if i in dyn_of_pos:
            e_dyn[r, dyn_of_pos[i]] = 1.0
        if j in dyn_of_pos:
            e_dyn[r, dyn_of_pos[j]] = -1.0

    c = np.zeros((n_br, n_state))
    c[:, :n_dyn] = e_dyn

    # B spreads branch nonlinearities to buses through M^{-1} E^T; the
    # interaction enters the power balance with a minus sign, hence -E^T
    inv_m_bus = np.concatenate([1.0 / m_vec, 1.0 / d_load])  # gens then loads
    me_t = e_dyn.T * inv_m_bus[:, None]
    b = np.zeros((n_state, n_br))
    b[n_gen:n_dyn, :] = -me_t[n_gen:, :]          # load angle rows
    b[n_dyn:, :] = -me_t[:n_gen, :]               # generator speed rows

    kappa = np.zeros(n_br)
    theta_eq = np.zeros(n_br)
    for r, (i, j, _k) in enumerate(branches):
        kappa[r] = post_eq.v[i] * post_eq.v[j] * y_post.branch_mag[r]
        theta_eq[r] = post_eq.theta[i] - post_eq.theta[j]
    alpha = y_post.branch_alpha.copy()
    if np.any(kappa <= 0.0):
        raise CaseError("in-service branch with vanishing coupling gain")

    if polytope == "shifted":
        y_hi = math.pi - 2.0 * theta_eq - 2.0 * alpha
        y_lo = -math.pi - 2.0 * theta_eq - 2.0 * alpha
    elif polytope == "symmetric":
        y_hi = math.pi * np.ones(n_br)
        y_lo = -math.pi * np.ones(n_br)
    else:
        raise ValueError(f"unknown polytope variant '{polytope}'")

    # quotient out the uniform-angle mode when no bus is static
    if len(case.infinite_positions) == 0:
        v = np.zeros((n_state, 1))
        v[:n_dyn, 0] = 1.0 / math.sqrt(n_dyn)
        u = null_space(v.T)
    else:
        u = np.eye(n_state)

    return LureSystem(
        a=a, b=b, c=c, u=u, kappa=kappa, alpha=alpha, theta_eq=theta_eq,
        y_lo=y_lo, y_hi=y_hi, branches=tuple(branches),
        dyn_positions=tuple(dyn), n_gen=n_gen,
        v_eq=post_eq.v.copy(), theta_eq_bus=post_eq.theta.copy(),
    )


def phi_eval(sys: LureSystem, k: int, y_k: float) -> float:
    """Branch nonlinearity: power deviation at angle deviation y_k."""
    t = sys.theta_eq[k] + sys.alpha[k]
    return float(sys.kappa[k] * (math.sin(y_k + t) - math.sin(t)))


def phi_vec(sys: LureSystem, y: np.ndarray) -> np.ndarray:
    t = sys.theta_eq + sys.alpha
    return sys.kappa * (np.sin(y + t) - np.sin(t))


def rhs_lure(sys: LureSystem, x: np.ndarray) -> np.ndarray:
    """Closed-loop vector field A x + B phi(C x)."""
    return sys.a @ x + sys.b @ phi_vec(sys, sys.c @ x)


def x_coords(sys: LureSystem, delta_dyn: np.ndarray,
             omega: np.ndarray) -> np.ndarray:
    """Map absolute (delta, omega) to deviations from the equilibrium."""
    th_eq = sys.theta_eq_bus[list(sys.dyn_positions)]
    return np.concatenate([delta_dyn - th_eq, omega - 1.0])


def design_sectors(case: PowerCase, y_post: AdmittanceMatrix,
                   xi: float = 1e-3) -> SectorBounds:
    """Sector bounds valid for every admissible post-fault equilibrium.

    beta_k = Vmax^2 |Y'_ij| dominates the nonlinearity slope for any
    voltages within limits; gamma is the small positive floor xi required
    because the linear part alone is not strictly stable.
    """
    if xi <= 0.0:
        raise ValueError("xi must be positive")
    beta = (case.limits.v_max ** 2) * y_post.branch_mag
    gamma = np.full_like(beta, xi)
    if np.any(gamma >= beta):
        raise ValueError("xi too large for the weakest branch coupling")
    return SectorBounds(gamma=gamma, beta=beta)


def polytope_bounds(sys: LureSystem) -> tuple[np.ndarray, np.ndarray]:
    """Per-branch [y_lo, y_hi] excursion window in x-coordinates."""
    return sys.y_lo.copy(), sys.y_hi.copy()


def sector_violations(sys: LureSystem, sectors: SectorBounds,
                      y: np.ndarray) -> np.ndarray:
    """Per-branch sector residual (phi - gamma y)(phi - beta y); <= 0 inside."""
    p = phi_vec(sys, y)
    return (p - sectors.gamma * y) * (p - sectors.beta * y)


def sector_contact_width(sys: LureSystem, sectors: SectorBounds,
                         k: int) -> tuple[float, float]:
    """Width of the polytope-edge neighbourhoods where the gamma = xi
    sector fails: phi returns to zero at both window edges while the
    xi-slope line does not, so a thin violating band hugs each edge.

    Returned as (lo_width, hi_width), found by bisection on the sector
    membership product between each edge and a sector-respecting
    interior point.
    """
    g = sectors.gamma[k]
    b = sectors.beta[k]

    def prod(yv):
        p = phi_eval(sys, k, yv)
        return (p - g * yv) * (p - b * yv)

    def edge_width(edge):
        if prod(edge) < 0.0:
            return 0.0
        inner = None
        for frac in (0.5, 0.25, 0.75, 0.1):
            cand = frac * edge
            if prod(cand) < 0.0:
                inner = cand
                break
        if inner is None:
            return abs(edge)  # no sector-respecting point found on this side
        outer = edge
        for _ in range(80):
            mid = 0.5 * (inner + outer)
            if prod(mid) < 0.0:
                inner = mid
            else:
                outer = mid
        return abs(edge - inner)

    return edge_width(sys.y_lo[k]), edge_width(sys.y_hi[k])
