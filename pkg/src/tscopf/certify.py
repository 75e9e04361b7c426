"""Quadratic Lyapunov certificates and invariant-set levels.

The certificate is a positive definite P on the reduced state space
(uniform-angle mode quotiented out when present) together with diagonal
multipliers tau, such that the circle-criterion block matrix is strictly
negative semidefinite.  W(x) = x'Px decays along closed-loop trajectories
wherever the sector condition holds, and the sublevel set
{x in P : W(x) <= Wmin} is invariant, with Wmin the smallest W value on
the polytope boundary hyperplanes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .lure import LureSystem, SectorBounds, phi_vec, rhs_lure, sector_violations
from .sdp import LmiInfeasible


class CertificateMismatch(RuntimeError):
    """A cached certificate does not match the system it is applied to."""


@dataclass(frozen=True)
class QuadraticCertificate:
    p: np.ndarray            # SPD on the reduced space
    tau: np.ndarray
    u: np.ndarray            # reduction basis (n_state, n_red)
    gamma: np.ndarray
    beta: np.ndarray
    lmi_margin: float
    mu: float
    tol_lmi: float
    sys_hash: str
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def lambda_min(self) -> float:
        if "lmin" not in self._cache:
            self._cache["lmin"] = float(np.min(np.linalg.eigvalsh(self.p)))
        return self._cache["lmin"]

    @property
    def p_full(self) -> np.ndarray:
        """P lifted to full coordinates (PSD; kernel = quotiented mode)."""
        if "p_full" not in self._cache:
            self._cache["p_full"] = self.u @ self.p @ self.u.T
        return self._cache["p_full"]

    @property
    def p_inv(self) -> np.ndarray:
        if "p_inv" not in self._cache:
            self._cache["p_inv"] = np.linalg.inv(self.p)
        return self._cache["p_inv"]

    def scaled(self, c: float) -> "QuadraticCertificate":
        """Certificate with (cP, c tau); feasible for any c > 0."""
        return QuadraticCertificate(
            p=c * self.p, tau=c * self.tau, u=self.u, gamma=self.gamma,
            beta=self.beta, lmi_margin=c * self.lmi_margin, mu=self.mu,
            tol_lmi=self.tol_lmi, sys_hash=self.sys_hash)


@dataclass(frozen=True)
class InvariantLevel:
    w_min: float
    branch: int                       # argmin branch
    per_branch: np.ndarray
    minimizers: np.ndarray            # (n_branch, n_state), full coordinates
    bounds: tuple


def solve_lmi(sys: LureSystem, sectors: SectorBounds, mu: float = 1e-6,
              tol_lmi: float = 1e-8) -> QuadraticCertificate:
    """Compute (P, tau) by the barrier scheme on the reduced matrices.

    The result is normalized so that lambda_min(P) is 1 where possible,
    keeping the recomputed LMI margin comfortably below -tol_lmi.
    """
    res = sdp.solve_lmi_feasibility(
        sys.a_red, sys.b_red, sys.c_red, sectors.gamma, sectors.beta,
        mu=mu, tol=tol_lmi)
    lmin = float(np.min(np.linalg.eigvalsh(res.p)))
    scale = max(1.0 / lmin, 100.0 * tol_lmi / abs(res.margin))
    p = res.p * scale
    tau = res.tau * scale
    margin = float(np.max(np.linalg.eigvalsh(sdp.lmi_matrix(
        sys.a_red, sys.b_red, sys.c_red, sectors.gamma, sectors.beta,
        p, tau))))
    if margin > -tol_lmi:
        raise LmiInfeasible(
            f"margin degraded under normalization: {margin:.3e}", margin)
    return QuadraticCertificate(
        p=p, tau=tau, u=sys.u, gamma=sectors.gamma.copy(),
        beta=sectors.beta.copy(), lmi_margin=margin, mu=mu, tol_lmi=tol_lmi,
        sys_hash=sys.content_hash())


def w_value(cert: QuadraticCertificate, x: np.ndarray) -> float:
    """Lyapunov energy x'Px (full coordinates)."""
    return float(x @ cert.p_full @ x)


def wdot_value(cert: QuadraticCertificate, sys: LureSystem,
               x: np.ndarray) -> float:
    """dW/dt along the closed loop: 2 x'P (Ax + B phi(Cx))."""
    return float(2.0 * x @ cert.p_full @ rhs_lure(sys, x))


@dataclass(frozen=True)
class WdotReport:
    n_sampled: int
    n_nonnegative: int
    worst: float
    worst_x: np.ndarray | None


def sample_polytope_states(sys: LureSystem, n: int, rng: np.random.Generator,
                           omega_amp: float = 1.0,
                           angle_amp: float = math.pi) -> np.ndarray:
    """States with branch deviations inside the polytope, uniform over a
    box in reduced angle/speed coordinates with rejection on Cx."""
    out = []
    n_dyn = sys.n_dyn
    n_gen = sys.n_gen
    while len(out) < n:
        batch = max(64, 2 * (n - len(out)))
        d = rng.uniform(-angle_amp, angle_amp, size=(batch, n_dyn))
        w = rng.uniform(-omega_amp, omega_amp, size=(batch, n_gen))
        x = np.hstack([d, w])
        y = x @ sys.c.T
        ok = np.all((y >= sys.y_lo) & (y <= sys.y_hi), axis=1)
        ok &= np.any(np.abs(x) > 1e-12, axis=1)
        out.extend(x[ok])
    return np.asarray(out[:n])


def check_wdot_negative(cert: QuadraticCertificate, sys: LureSystem,
                        n_samples: int = 10_000, seed: int = 42,
                        omega_amp: float = 1.0) -> WdotReport:
    """Sample sector-respecting states in the polytope and report the
    worst dW/dt found (strictly negative everywhere when the LMI holds)."""
    if cert.sys_hash != sys.content_hash():
        raise CertificateMismatch("certificate/topology hash mismatch")
    sectors = SectorBounds(gamma=cert.gamma, beta=cert.beta)
    rng = np.random.default_rng(seed)
    kept = 0
    worst = -np.inf
    worst_x = None
    n_bad = 0
    while kept < n_samples:
        states = sample_polytope_states(sys, 4 * (n_samples - kept), rng,
                                        omega_amp=omega_amp)
        y = states @ sys.c.T
        for row in range(states.shape[0]):
            if kept >= n_samples:
                break
            res = sector_violations(sys, sectors, y[row])
            if np.any(res > 0.0) or not np.any(res < 0.0):
                continue
            kept += 1
            wd = wdot_value(cert, sys, states[row])
            if wd >= 0.0:
                n_bad += 1
            if wd > worst:
                worst = wd
                worst_x = states[row].copy()
    return WdotReport(n_sampled=kept, n_nonnegative=n_bad, worst=worst,
                      worst_x=worst_x)


def _branch_bounds(sys: LureSystem, xstar, delta_l, bounds):
    if bounds is not None:
        lo = np.asarray([b[0] for b in bounds], dtype=float)
        hi = np.asarray([b[1] for b in bounds], dtype=float)
        return lo, hi
    base = sys.c @ np.asarray(xstar, dtype=float) if xstar is not None \
        else np.zeros(sys.n_branch)
    return base - delta_l, base + delta_l


def w_min_closed_form(cert: QuadraticCertificate, sys: LureSystem,
                      xstar: np.ndarray | None = None,
                      delta_l: float = math.pi,
                      bounds=None) -> InvariantLevel:
    """Smallest W on the boundary hyperplanes, by the rank-one formula.

    Per branch the minimum of x'Px subject to C_i'x = y is
    y^2 / (C_i' P^{-1} C_i), attained at x = y P^{-1}C_i / (C_i'P^{-1}C_i).
    Window edges default to C_i'xstar +/- delta_l; explicit per-branch
    ``bounds`` override (used for the grid's alpha-shifted polytope).
    """
    lo, hi = _branch_bounds(sys, xstar, delta_l, bounds)
    cr = sys.c_red
    pinv_c = cert.p_inv @ cr.T                    # (n_red, n_branch)
    quad = np.einsum("ij,ij->j", cr.T, pinv_c)    # C_i' P^{-1} C_i
    per = np.minimum(lo ** 2, hi ** 2) / quad
    y_star = np.where(lo ** 2 <= hi ** 2, lo, hi)
    minimizers = (sys.u @ (pinv_c / quad)) * y_star   # columns are xhat_i
    k = int(np.argmin(per))
    return InvariantLevel(w_min=float(per[k]), branch=k,
                          per_branch=per, minimizers=minimizers.T,
                          bounds=tuple(zip(lo.tolist(), hi.tolist())))


def w_min_bruteforce(cert: QuadraticCertificate, sys: LureSystem,
                     xstar: np.ndarray | None = None,
                     delta_l: float = math.pi, bounds=None) -> float:
    """Independent oracle: per hyperplane, solve the equality-constrained
    quadratic minimization through its KKT linear system."""
    lo, hi = _branch_bounds(sys, xstar, delta_l, bounds)
    cr = sys.c_red
    n = cr.shape[1]
    best = np.inf
    for i in range(sys.n_branch):
        for yv in (lo[i], hi[i]):
            kkt = np.zeros((n + 1, n + 1))
            kkt[:n, :n] = 2.0 * cert.p
            kkt[:n, n] = cr[i]
            kkt[n, :n] = cr[i]
            rhs = np.zeros(n + 1)
            rhs[n] = yv
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                raise RuntimeError(f"singular KKT system on branch {i}") from None
            best = min(best, float(sol[:n] @ cert.p @ sol[:n]))
    return best


def grid_invariant_level(cert: QuadraticCertificate,
                         sys: LureSystem) -> InvariantLevel:
    """Invariant level for the system's own polytope window."""
    return w_min_closed_form(cert, sys,
                             bounds=list(zip(sys.y_lo, sys.y_hi)))


def invariant_set_contains(cert: QuadraticCertificate, level: InvariantLevel,
                           sys: LureSystem, x: np.ndarray) -> bool:
    """Membership in Omega = {x in P : W(x) <= Wmin}."""
    y = sys.c @ x
    in_poly = bool(np.all(y >= sys.y_lo) and np.all(y <= sys.y_hi))
    return in_poly and w_value(cert, x) <= level.w_min


def _payload_checksum(payload: dict) -> str:
    import hashlib
    blob = json.dumps({k: v for k, v in payload.items() if k != "checksum"},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_certificate(path: str, cert: QuadraticCertificate) -> None:
    payload = {
        "schema_version": 1,
        "p": cert.p.tolist(),
        "tau": cert.tau.tolist(),
        "u": cert.u.tolist(),
        "gamma": cert.gamma.tolist(),
        "beta": cert.beta.tolist(),
        "lmi_margin": cert.lmi_margin,
        "mu": cert.mu,
        "tol_lmi": cert.tol_lmi,
        "sys_hash": cert.sys_hash,
    }
    payload["checksum"] = _payload_checksum(payload)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def load_certificate(path: str, sys: LureSystem | None = None) -> QuadraticCertificate:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if d.get("checksum") != _payload_checksum(d):
        raise CertificateMismatch("certificate cache corrupted (checksum)")
    cert = QuadraticCertificate(
        p=np.asarray(d["p"]), tau=np.asarray(d["tau"]), u=np.asarray(d["u"]),
        gamma=np.asarray(d["gamma"]), beta=np.asarray(d["beta"]),
        lmi_margin=float(d["lmi_margin"]), mu=float(d["mu"]),
        tol_lmi=float(d["tol_lmi"]), sys_hash=str(d["sys_hash"]))
    if sys is not None and cert.sys_hash != sys.content_hash():
        raise CertificateMismatch("certificate/topology hash mismatch")
    return cert
