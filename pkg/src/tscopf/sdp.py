"""Dense log-det barrier solver for the stability LMI feasibility problem.

Solves, over symmetric P and diagonal multipliers tau >= 0,

    minimize   t
    subject to F(P, tau) <= t I,   mu I <= P <= rho I,   0 <= tau <= tau_max,

where F is the circle-criterion block matrix

    F = [ A'P + PA - C' diag(tau g b) C     P B + 1/2 C' diag((g+b) tau) ]
        [            (sym)                          -diag(tau)          ]

for sector slopes g < b per nonlinearity.  The problem is homogeneous in
(P, tau, t); the box mu I <= P <= rho I pins the scale.  Feasibility with
margin means the returned t (recomputed as the exact largest eigenvalue
of F) is <= -tol.

The scheme is a standard barrier interior point: for increasing eta,
Newton-minimize

    eta * t - logdet(tI - F) - logdet(P - mu I) - logdet(rho I - P)
            - sum log tau - sum log(tau_max - tau)

over the packed coordinates of P, tau and t.  Matrix sizes here are tiny
(state dimension <= a few tens), so all barrier Hessians are assembled
densely from explicit basis matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LmiInfeasible(RuntimeError):
    """LMI feasibility failed; carries the best achieved margin."""

    def __init__(self, msg: str, margin: float):
        super().__init__(msg)
        self.margin = margin


@dataclass
class LmiResult:
    p: np.ndarray
    tau: np.ndarray
    margin: float          # exact lambda_max of F(P, tau)
    t: float               # barrier objective value at exit
    newton_steps: int
    eta: float


def lmi_matrix(a, b, c, gamma, beta, p, tau) -> np.ndarray:
    """Assemble F(P, tau) for given certificate candidates."""
    n = a.shape[0]
    m = c.shape[0]
    f = np.zeros((n + m, n + m))
    f[:n, :n] = a.T @ p + p @ a - c.T @ np.diag(tau * gamma * beta) @ c
    cross = p @ b + 0.5 * c.T @ np.diag((gamma + beta) * tau)
    f[:n, n:] = cross
    f[n:, :n] = cross.T
    f[n:, n:] = -np.diag(tau)
    return f


def _sym_basis(n: int) -> list[np.ndarray]:
    """Unnormalized symmetric coordinate basis, diagonal first."""
    out = []
    for i in range(n):
        e = np.zeros((n, n))
        e[i, i] = 1.0
        out.append(e)
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def _barrier_terms(s: np.ndarray, basis: list[np.ndarray], idx: list[int],
                   nvar: int, grad: np.ndarray, hess: np.ndarray) -> float:
    """Accumulate gradient/Hessian of -logdet(S) wrt coordinates idx.

    basis[k] is dS/dv_{idx[k]}.  Returns logdet(S).  Raises
    np.linalg.LinAlgError if S is not positive definite.
    """
    l = np.linalg.cholesky(s)
    linv = np.linalg.inv(l)
    sinv = linv.T @ linv
    w = [linv @ bk @ linv.T for bk in basis]
    for k, i in enumerate(idx):
        grad[i] -= float(np.sum(sinv * basis[k]))
    nb = len(basis)
    for k1 in range(nb):
        wk1 = w[k1]
        for k2 in range(k1, nb):
            h = float(np.sum(wk1 * w[k2].T))
            i, j = idx[k1], idx[k2]
            hess[i, j] += h
            if i != j:
                hess[j, i] += h
    return 2.0 * float(np.sum(np.log(np.diag(l))))


def solve_lmi_feasibility(a, b, c, gamma, beta, mu: float = 1e-6,
                          rho: float = 1e3, tau_max: float = 1e6,
                          tol: float = 1e-8, eta_max: float = 1e12,
                          max_newton: int = 400) -> LmiResult:
    """Run the barrier scheme; returns certificate candidates and margin.

    Raises LmiInfeasible when the final exact margin exceeds -tol.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = a.shape[0]
    m = c.shape[0]
    np_coord = n * (n + 1) // 2
    nvar = np_coord + m + 1
    it_tau = list(range(np_coord, np_coord + m))
    it_t = nvar - 1

    pbasis = _sym_basis(n)

    # dF/dP_k and dF/dtau_k as constant matrices in the big block space
    big = n + m
    df_dp = []
    for e in pbasis:
        d = np.zeros((big, big))
        d[:n, :n] = a.T @ e + e @ a
        d[:n, n:] = e @ b
        d[n:, :n] = (e @ b).T
        df_dp.append(d)
    df_dtau = []
    for k in range(m):
        d = np.zeros((big, big))
        ck = c[k, :]
        d[:n, :n] = -gamma[k] * beta[k] * np.outer(ck, ck)
        d[:n, n + k] = 0.5 * (gamma[k] + beta[k]) * ck
        d[n + k, :n] = d[:n, n + k]
        d[n + k, n + k] = -1.0
        df_dtau.append(d)
    # dS_lmi/dv for S_lmi = tI - F
    lmi_basis = [-d for d in df_dp] + [-d for d in df_dtau] + [np.eye(big)]
    lmi_idx = list(range(nvar))

    def unpack(v):
        p = np.zeros((n, n))
        k = 0
        for i in range(n):
            p[i, i] = v[k]
            k += 1
        for i in range(n):
            for j in range(i + 1, n):
                p[i, j] = p[j, i] = v[k]
                k += 1
        return p, v[np_coord:np_coord + m], v[it_t]

    def blocks(v):
        p, tau, t = unpack(v)
        s_lmi = t * np.eye(big) - lmi_matrix(a, b, c, gamma, beta, p, tau)
        return p, tau, t, s_lmi

    def feasible(v):
        p, tau, t, s_lmi = blocks(v)
        if np.any(tau <= 0.0) or np.any(tau >= tau_max):
            return False
        for s in (s_lmi, p - mu * np.eye(n), rho * np.eye(n) - p):
            try:
                np.linalg.cholesky(s)
            except np.linalg.LinAlgError:
                return False
        return True

    def phi(v, eta):
        p, tau, t, s_lmi = blocks(v)
        val = eta * t
        for s in (s_lmi, p - mu * np.eye(n), rho * np.eye(n) - p):
            sign, ld = np.linalg.slogdet(s)
            if sign <= 0:
                return np.inf
            val -= ld
        val -= float(np.sum(np.log(tau)) + np.sum(np.log(tau_max - tau)))
        return val

    # strictly feasible start
    v = np.zeros(nvar)
    for i in range(n):
        v[i] = 1.0                     # P = I
    v[np_coord:np_coord + m] = 1.0     # tau = 1
    p0, tau0, _ = unpack(v)
    f0 = lmi_matrix(a, b, c, gamma, beta, p0, tau0)
    lam0 = float(np.max(np.linalg.eigvalsh(f0)))
    v[it_t] = lam0 + max(1.0, 0.1 * abs(lam0))

    eta = 1.0
    steps = 0
    nu_total = big + 2 * n + 2 * m     # total barrier parameter
    while True:
        # center for current eta
        for _ in range(60):
            if steps >= max_newton:
                break
            p, tau, t, s_lmi = blocks(v)
            grad = np.zeros(nvar)
            hess = np.zeros((nvar, nvar))
            grad[it_t] += eta
            try:
                _barrier_terms(s_lmi, lmi_basis, lmi_idx, nvar, grad, hess)
                _barrier_terms(p - mu * np.eye(n), pbasis,
                               list(range(np_coord)), nvar, grad, hess)
                _barrier_terms(rho * np.eye(n) - p, [-e for e in pbasis],
                               list(range(np_coord)), nvar, grad, hess)
            except np.linalg.LinAlgError:
                raise LmiInfeasible("barrier iterate left the cone", np.inf)
            grad[it_tau] += -1.0 / tau + 1.0 / (tau_max - tau)
            hess[it_tau, it_tau] += 1.0 / tau ** 2 + 1.0 / (tau_max - tau) ** 2

            try:
                dv = np.linalg.solve(hess + 1e-12 * np.eye(nvar), -grad)
            except np.linalg.LinAlgError:
                dv = np.linalg.lstsq(hess, -grad, rcond=None)[0]
            decrement = float(-grad @ dv)
            if decrement <= 1e-14:
                break
            # backtrack into the cone with sufficient decrease
            alpha = 1.0
            base = phi(v, eta)
            for _h in range(60):
                cand = v + alpha * dv
                if feasible(cand) and phi(cand, eta) <= base + 0.25 * alpha * (grad @ dv):
                    break
                alpha *= 0.5
            else:
                alpha = 0.0
            if alpha == 0.0:
                break
            v = v + alpha * dv
            steps += 1
            if decrement < 1e-9:
                break
        gap = nu_total / eta
        _, _, t_cur, _ = blocks(v)
        if gap <= max(1e-10, 1e-7 * abs(t_cur)) or eta >= eta_max or steps >= max_newton:
            break
        eta *= 20.0

    p, tau, t, _ = blocks(v)
    f = lmi_matrix(a, b, c, gamma, beta, p, tau)
    margin = float(np.max(np.linalg.eigvalsh(f)))
    if margin > -tol:
        raise LmiInfeasible(
            f"LMI not strictly feasible: best margin {margin:.3e} > {-tol:.1e}",
            margin)
    return LmiResult(p=p, tau=tau, margin=margin, t=float(t),
                     newton_steps=steps, eta=eta)
