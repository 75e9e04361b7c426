"""Primal-dual interior-point solver for smooth nonlinear programs.

Problems are

    min f(z)   s.t.  cE(z) = 0,  cI(z) <= 0,  lb <= z <= ub,

with analytic first derivatives.  Inequalities get slacks s > 0 with
cI + s = 0; bounds are handled by direct log barriers.  Each iteration
solves the condensed primal-dual Newton system

    [ H + Sigma_B + JI' Sigma_s JI   JE' ] [dz]   [ b_z ]
    [ JE                           -dc I ] [dy] = [ -cE ]

with inertia correction on the (1,1) block, a fraction-to-boundary rule
and a backtracking line search on an l1 exact-penalty merit function.
The Lagrangian Hessian is built by forward differences of the analytic
gradient (problem sizes here are tens of variables, and the first-order
KKT residual is always evaluated from the exact first derivatives).

Fixed variables (lb == ub) are eliminated before solving.  The solver is
fully deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import ldl


class BadProblem(ValueError):
    """Problem definition is inconsistent."""


@dataclass
class ConstraintBlock:
    name: str
    kind: str                 # "eq" | "ineq"
    fun: callable             # z -> (m,) values
    jac: callable             # z -> (m, n) dense Jacobian
    size: int


@dataclass
class NlpProblem:
    n: int
    lb: np.ndarray
    ub: np.ndarray
    objective: callable
    gradient: callable
    blocks: list
    x0: np.ndarray
    var_names: list | None = None
    meta: dict = field(default_factory=dict)

    def eq_blocks(self):
        return [b for b in self.blocks if b.kind == "eq"]

    def ineq_blocks(self):
        return [b for b in self.blocks if b.kind == "ineq"]

    def eval_stacked(self, z, kind):
        blocks = [b for b in self.blocks if b.kind == kind]
        if not blocks:
            return np.zeros(0)
        return np.concatenate([np.atleast_1d(b.fun(z)) for b in blocks])

    def jac_stacked(self, z, kind):
        blocks = [b for b in self.blocks if b.kind == kind]
        if not blocks:
            return np.zeros((0, self.n))
        return np.vstack([np.atleast_2d(b.jac(z)) for b in blocks])

    def block_slices(self, kind):
        out = {}
        k = 0
        for b in self.blocks:
            if b.kind == kind:
                out[b.name] = slice(k, k + b.size)
                k += b.size
        return out


@dataclass
class NlpOptions:
    tol: float = 5e-9
    tol_accept: float = 1e-6
    max_iter: int = 300
    mu_init: float = 1e-2
    mu_min: float = 1e-11
    kappa_mu: float = 0.2
    theta_mu: float = 1.2
    tau_min: float = 0.995
    fd_step: float = 1e-7
    kappa_sigma: float = 1e10
    verbose: bool = False


@dataclass
class OptSolution:
    x: np.ndarray
    f: float
    status: str               # Optimal | Infeasible | IterationLimit
    kkt_residual: float
    y_eq: np.ndarray
    w_in: np.ndarray
    s_in: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    iterations: int
    wall_time: float
    mu_final: float


def check_derivatives(problem: NlpProblem, z: np.ndarray,
                      h: float = 1e-6) -> float:
    """Max relative error of analytic first derivatives vs central FD."""
    worst = 0.0
    g = problem.gradient(z)
    for k in range(problem.n):
        e = np.zeros(problem.n)
        e[k] = h * max(1.0, abs(z[k]))
        fd = (problem.objective(z + e) - problem.objective(z - e)) / (2 * e[k])
        scale = max(1.0, abs(fd), abs(g[k]))
        worst = max(worst, abs(g[k] - fd) / scale)
    for kind in ("eq", "ineq"):
        jac = problem.jac_stacked(z, kind)
        if jac.shape[0] == 0:
            continue
        for k in range(problem.n):
            e = np.zeros(problem.n)
            e[k] = h * max(1.0, abs(z[k]))
            fd = (problem.eval_stacked(z + e, kind)
                  - problem.eval_stacked(z - e, kind)) / (2 * e[k])
            scale = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(jac[:, k])))
            worst = max(worst, float(np.max(np.abs(jac[:, k] - fd) / scale)))
    return worst


class _Reduced:
    """View of the problem with fixed variables (lb == ub) eliminated."""

    def __init__(self, problem: NlpProblem):
        lb, ub = problem.lb, problem.ub
        with np.errstate(invalid="ignore"):
            self.fixed = np.abs(ub - lb) <= 1e-14
        self.free = ~self.fixed
        self.z_fixed = np.zeros(len(lb))
        self.z_fixed[self.fixed] = 0.5 * (lb[self.fixed] + ub[self.fixed])
        self.problem = problem
        self.n = int(np.sum(self.free))
        self.lb = lb[self.free]
        self.ub = ub[self.free]

    def full(self, z):
        out = self.z_fixed.copy()
        out[self.free] = z
        return out

    def objective(self, z):
        return self.problem.objective(self.full(z))

    def gradient(self, z):
        return self.problem.gradient(self.full(z))[self.free]

    def c(self, z, kind):
        return self.problem.eval_stacked(self.full(z), kind)

    def jac(self, z, kind):
        return self.problem.jac_stacked(self.full(z), kind)[:, self.free]


def _inertia(kmat: np.ndarray):
    """(n_pos, n_neg, n_zero) of a symmetric matrix via LDL."""
    if kmat.shape[0] == 0:
        return 0, 0, 0
    _, d, _ = ldl(kmat, lower=True)
    pos = neg = zero = 0
    k = 0
    n = d.shape[0]
    while k < n:
        if k + 1 < n and abs(d[k + 1, k]) > 1e-14:
            ev = np.linalg.eigvalsh(d[k:k + 2, k:k + 2])
            for e in ev:
                if e > 1e-14:
                    pos += 1
                elif e < -1e-14:
                    neg += 1
                else:
                    zero += 1
            k += 2
        else:
            e = d[k, k]
            if e > 1e-14:
                pos += 1
            elif e < -1e-14:
                neg += 1
            else:
                zero += 1
            k += 1
    return pos, neg, zero


def solve_nlp(problem: NlpProblem, opts: NlpOptions | None = None) -> OptSolution:
    """Line-search primal-dual interior point; deterministic.

    Returns status Optimal when the unscaled first-order KKT residual
    drops below opts.tol (or below opts.tol_accept on stall), Infeasible
    when the iteration stalls at a significantly infeasible point,
    IterationLimit otherwise.
    """
    opts = opts or NlpOptions()
    t_start = time.perf_counter()
    red = _Reduced(problem)
    n = red.n
    lb, ub = red.lb, red.ub
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)

    z = np.clip(problem.x0[red.free],
                np.where(has_lb, lb + 1e-3 * np.minimum(1.0, np.where(
                    has_ub, ub - lb, 2.0)), -1e19),
                np.where(has_ub, ub - 1e-3 * np.minimum(1.0, np.where(
                    has_lb, ub - lb, 2.0)), 1e19))
    z = np.where(np.isfinite(z), z, 0.0)

    c_eq = red.c(z, "eq")
    c_in = red.c(z, "ineq")
    m_eq, m_in = len(c_eq), len(c_in)
    s = np.maximum(1e-2, -c_in + 1e-2)
    mu = opts.mu_init
    w = mu / s
    zl = np.where(has_lb, mu / np.maximum(z - lb, 1e-8), 0.0)
    zu = np.where(has_ub, mu / np.maximum(ub - z, 1e-8), 0.0)
    y = np.zeros(m_eq)
    nu_pen = 1.0
    grad_evals = {"count": 0}

    def grad_lag(zv, yv, wv):
        grad_evals["count"] += 1
        g = red.gradient(zv)
        if m_eq:
            g = g + red.jac(zv, "eq").T @ yv
        if m_in:
            g = g + red.jac(zv, "ineq").T @ wv
        return g

    nl_mask = problem.meta.get("nonlinear_mask")
    nl_cols = (np.asarray(nl_mask)[red.free] if nl_mask is not None
               else np.ones(n, dtype=bool))

    def fd_hessian(zv, yv, wv, g0):
        # columns for variables that appear only linearly are zero
        h = np.zeros((n, n))
        for k in np.where(nl_cols)[0]:
            step = opts.fd_step * max(1.0, abs(zv[k]))
            e = zv.copy()
            e[k] += step
            h[:, k] = (grad_lag(e, yv, wv) - g0) / step
        return 0.5 * (h + h.T)

    def kkt_error(zv, sv, yv, wv, zlv, zuv, mu_val):
        g = red.gradient(zv)
        je = red.jac(zv, "eq") if m_eq else None
        ji = red.jac(zv, "ineq") if m_in else None
        r = g.copy()
        if m_eq:
            r += je.T @ yv
        if m_in:
            r += ji.T @ wv
        r -= zlv
        r += zuv
        parts = [float(np.max(np.abs(r))) if n else 0.0]
        parts.append(float(np.max(np.abs(red.c(zv, "eq")))) if m_eq else 0.0)
        parts.append(float(np.max(np.abs(red.c(zv, "ineq") + sv))) if m_in else 0.0)
        if m_in:
            parts.append(float(np.max(np.abs(sv * wv - mu_val))))
        if np.any(has_lb):
            parts.append(float(np.max(np.abs((zv - lb)[has_lb] * zlv[has_lb] - mu_val))))
        if np.any(has_ub):
            parts.append(float(np.max(np.abs((ub - zv)[has_ub] * zuv[has_ub] - mu_val))))
        return max(parts)

    def merit(zv, sv, mu_val, nu):
        val = red.objective(zv)
        if m_in:
            val -= mu_val * float(np.sum(np.log(sv)))
        if np.any(has_lb):
            val -= mu_val * float(np.sum(np.log((zv - lb)[has_lb])))
        if np.any(has_ub):
            val -= mu_val * float(np.sum(np.log((ub - zv)[has_ub])))
        theta = 0.0
        if m_eq:
            theta += float(np.sum(np.abs(red.c(zv, "eq"))))
        if m_in:
            theta += float(np.sum(np.abs(red.c(zv, "ineq") + sv)))
        return val + nu * theta

    status = "IterationLimit"
    it = 0
    stall = 0
    best_kkt = np.inf
    for it in range(1, opts.max_iter + 1):
        c_eq = red.c(z, "eq")
        c_in = red.c(z, "ineq")
        je = red.jac(z, "eq") if m_eq else np.zeros((0, n))
        ji = red.jac(z, "ineq") if m_in else np.zeros((0, n))

        err0 = kkt_error(z, s, y, w, zl, zu, 0.0)
        best_kkt = min(best_kkt, err0)
        if err0 <= opts.tol:
            status = "Optimal"
            break
        err_mu = kkt_error(z, s, y, w, zl, zu, mu)
        if err_mu <= 10.0 * mu and mu > opts.mu_min:
            mu = max(opts.mu_min, min(opts.kappa_mu * mu, mu ** opts.theta_mu))
            continue

        g0 = grad_lag(z, y, w)
        hess = fd_hessian(z, y, w, g0)

        sig_b = np.zeros(n)
        if np.any(has_lb):
            sig_b[has_lb] += zl[has_lb] / (z - lb)[has_lb]
        if np.any(has_ub):
            sig_b[has_ub] += zu[has_ub] / (ub - z)[has_ub]
        sig_s = w / s if m_in else np.zeros(0)

        h_bar = hess + np.diag(sig_b)
        if m_in:
            h_bar = h_bar + ji.T @ (sig_s[:, None] * ji)

        b_z = -red.gradient(z)
        if np.any(has_lb):
            b_z[has_lb] += mu / (z - lb)[has_lb]
        if np.any(has_ub):
            b_z[has_ub] -= mu / (ub - z)[has_ub]
        if m_eq:
            b_z -= je.T @ y
        if m_in:
            b_z -= ji.T @ (mu / s + sig_s * (c_in + s))

        # inertia-corrected KKT solve
        delta_w = 0.0
        delta_c = 0.0
        for trial in range(12):
            kmat = np.zeros((n + m_eq, n + m_eq))
            kmat[:n, :n] = h_bar + delta_w * np.eye(n)
            if m_eq:
                kmat[:n, n:] = je.T
                kmat[n:, :n] = je
                kmat[n:, n:] = -delta_c * np.eye(m_eq)
            try:
                sol = np.linalg.solve(kmat, np.concatenate([b_z, -c_eq]))
            except np.linalg.LinAlgError:
                delta_w = max(1e-8, 10.0 * delta_w) * 10.0
                delta_c = max(delta_c, 1e-10)
                continue
            pos, neg, zero = _inertia(kmat)
            if pos == n and neg == m_eq and zero == 0:
                break
            delta_w = 1e-6 * max(1.0, float(np.trace(h_bar)) / max(n, 1)) \
                if delta_w == 0.0 else 10.0 * delta_w
            if zero > 0:
                delta_c = max(1e-10, 10.0 * delta_c)
        dz = sol[:n]
        dy = sol[n:] if m_eq else np.zeros(0)

        ds = (-(c_in + s) - ji @ dz) if m_in else np.zeros(0)
        dw = (mu / s - w - sig_s * ds) if m_in else np.zeros(0)
        dzl = np.zeros(n)
        if np.any(has_lb):
            dzl[has_lb] = (mu / (z - lb)[has_lb] - zl[has_lb]
                           - (zl[has_lb] / (z - lb)[has_lb]) * dz[has_lb])
        dzu = np.zeros(n)
        if np.any(has_ub):
            dzu[has_ub] = (mu / (ub - z)[has_ub] - zu[has_ub]
                           + (zu[has_ub] / (ub - z)[has_ub]) * dz[has_ub])

        # fraction-to-boundary step caps
        tau = max(opts.tau_min, 1.0 - mu)
        alpha_p = 1.0
        if m_in:
            neg_mask = ds < 0
            if np.any(neg_mask):
                alpha_p = min(alpha_p, float(np.min(
                    -tau * s[neg_mask] / ds[neg_mask])))
        if np.any(has_lb):
            mask = has_lb & (dz < 0)
            if np.any(mask):
                alpha_p = min(alpha_p, float(np.min(
                    -tau * (z - lb)[mask] / dz[mask])))
        if np.any(has_ub):
            mask = has_ub & (dz > 0)
            if np.any(mask):
                alpha_p = min(alpha_p, float(np.min(
                    tau * (ub - z)[mask] / dz[mask])))
        alpha_d = 1.0
        for vec, dvec in ((w, dw), (zl[has_lb], dzl[has_lb]),
                          (zu[has_ub], dzu[has_ub])):
            if len(vec):
                mask = dvec < 0
                if np.any(mask):
                    alpha_d = min(alpha_d, float(np.min(
                        -tau * vec[mask] / dvec[mask])))

        # l1 merit line search
        theta = (float(np.sum(np.abs(c_eq))) if m_eq else 0.0) \
            + (float(np.sum(np.abs(c_in + s))) if m_in else 0.0)
        gdir = float(red.gradient(z) @ dz)
        if theta > 1e-12:
            nu_req = abs(gdir) / ((1.0 - 0.5) * theta)
            nu_pen = max(nu_pen, min(nu_req, 1e8))
        mult_norm = max(
            [1.0]
            + ([float(np.max(np.abs(y + dy)))] if m_eq else [])
            + ([float(np.max(np.abs(w)))] if m_in else []))
        nu_pen = max(nu_pen, 1.1 * mult_norm)

        phi0 = merit(z, s, mu, nu_pen)
        dphi = gdir - nu_pen * theta
        if np.any(has_lb):
            dphi -= float(mu * np.sum(dz[has_lb] / (z - lb)[has_lb]))
        if np.any(has_ub):
            dphi += float(mu * np.sum(dz[has_ub] / (ub - z)[has_ub]))
        if m_in:
            dphi -= float(mu * np.sum(ds / s))

        def candidate_duals(a_pr, a_du):
            y_c = y + a_pr * dy if m_eq else y
            w_c = np.clip(w + a_du * dw, 1e-16, 1e16) if m_in else w
            zl_c = np.where(has_lb, np.clip(zl + a_du * dzl, 1e-16, 1e16), 0.0)
            zu_c = np.where(has_ub, np.clip(zu + a_du * dzu, 1e-16, 1e16), 0.0)
            return y_c, w_c, zl_c, zu_c

        err_cur = kkt_error(z, s, y, w, zl, zu, mu)
        alpha = alpha_p
        accepted = False
        for _bt in range(40):
            z_new = z + alpha * dz
            s_new = s + alpha * ds if m_in else s
            ok = True
            if m_in and np.any(s_new <= 0):
                ok = False
            if ok and np.any(has_lb) and np.any((z_new - lb)[has_lb] <= 0):
                ok = False
            if ok and np.any(has_ub) and np.any((ub - z_new)[has_ub] <= 0):
                ok = False
            if ok:
                phi_new = merit(z_new, s_new, mu, nu_pen)
                if phi_new <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-14:
                    accepted = True
                    break
                # steps that mostly correct the duals can raise the primal
                # merit; accept them when the barrier KKT error drops
                y_c, w_c, zl_c, zu_c = candidate_duals(alpha, min(alpha, alpha_d))
                if kkt_error(z_new, s_new, y_c, w_c, zl_c, zu_c,
                             mu) <= 0.999 * err_cur:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            stall += 1
            if stall >= 3:
                mu = min(opts.mu_init, mu * 10.0)
                w = np.maximum(w, mu / np.maximum(s, 1e-8)) if m_in else w
                stall = 0
                if best_kkt <= opts.tol_accept:
                    status = "Optimal"
                    break
            continue
        stall = 0

        z = z_new
        y, w, zl, zu = candidate_duals(alpha, alpha_d)
        if m_in:
            s = s_new
            # multiplier safeguard keeps w within kappa_sigma of mu/s
            w = np.clip(w, mu / (opts.kappa_sigma * s),
                        opts.kappa_sigma * mu / s)
        if np.any(has_lb):
            zl[has_lb] = np.clip(
                zl[has_lb], mu / (opts.kappa_sigma * (z - lb)[has_lb]),
                opts.kappa_sigma * mu / (z - lb)[has_lb])
        if np.any(has_ub):
            zu[has_ub] = np.clip(
                zu[has_ub], mu / (opts.kappa_sigma * (ub - z)[has_ub]),
                opts.kappa_sigma * mu / (ub - z)[has_ub])
        if m_eq and np.max(np.abs(y), initial=0.0) > 1e8:
            # least-squares re-estimate after a multiplier blow-up
            g = red.gradient(z)
            rhs_y = -(g + (red.jac(z, "ineq").T @ w if m_in else 0.0)
                      - zl + zu)
            y = np.linalg.lstsq(red.jac(z, "eq").T, rhs_y, rcond=None)[0]

        if opts.verbose:
            print(f"it {it:3d} mu {mu:9.2e} kkt {err0:9.2e} "
                  f"alpha {alpha:8.2e} f {red.objective(z):12.6e}")

    final_kkt = kkt_error(z, s, y, w, zl, zu, 0.0)
    if status != "Optimal":
        if final_kkt <= opts.tol_accept:
            status = "Optimal"
        else:
            theta = (float(np.max(np.abs(red.c(z, "eq")))) if m_eq else 0.0)
            if m_in:
                theta = max(theta, float(np.max(np.maximum(
                    red.c(z, "ineq"), 0.0))))
            if theta > 1e-6:
                status = "Infeasible"

    z_full = red.full(z)
    zl_full = np.zeros(problem.n)
    zu_full = np.zeros(problem.n)
    zl_full[red.free] = zl
    zu_full[red.free] = zu
    return OptSolution(
        x=z_full, f=float(problem.objective(z_full)), status=status,
        kkt_residual=float(final_kkt), y_eq=y, w_in=w, s_in=s,
        z_lb=zl_full, z_ub=zu_full, iterations=it,
        wall_time=time.perf_counter() - t_start, mu_final=mu)
