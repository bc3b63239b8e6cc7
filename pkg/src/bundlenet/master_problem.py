"""Dual master problem of the proximal bundle method.

    min_theta  (eta/2) ||sum_i theta_i g_i||^2 + sum_i theta_i alpha_i
    s.t.       theta in the unit simplex

solved by accelerated projected gradient with adaptive restart. Once the
iterate's support settles, the equality-constrained KKT system on the support
is solved directly, which takes the residual down to rounding level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oracles import ContractError


def project_simplex(z) -> np.ndarray:
    """Euclidean projection onto {p >= 0, sum p = 1} (sort-based threshold)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise ContractError("simplex projection needs a non-empty vector")
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, z.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(z - tau, 0.0)


@dataclass
class DmpSolution:
    theta: np.ndarray
    w: np.ndarray
    sigma: float
    objective: float
    v_star: float
    kkt_residual: float
    iterations: int = 0


class DmpNotConverged(RuntimeError):
    def __init__(self, solution: DmpSolution):
        super().__init__(f"dual master problem stalled at KKT residual {solution.kkt_residual:.3e}")
        self.solution = solution


def aggregate(theta, G, alpha) -> tuple[np.ndarray, float]:
    """Return (w, sigma) = (sum theta_i g_i, sum theta_i alpha_i)."""
    theta = np.asarray(theta, dtype=float)
    G = np.asarray(G, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if not (theta.shape[0] == G.shape[0] == alpha.shape[0]):
        raise ContractError("theta, subgradients and errors must have the same length")
    return theta @ G, float(theta @ alpha)


def kkt_residual(theta, grad) -> float:
    """Fixed-point residual of the projected gradient map, relative to the gradient scale."""
    r = np.max(np.abs(theta - project_simplex(theta - grad)))
    return float(r / max(1.0, float(np.max(np.abs(grad)))))


def _polish(Q, alpha, eta, theta, tol):
    """Active-set refinement from the support of ``theta``.

    Solves the KKT system on the support, drops indices that go negative and
    adds the most violated outside index, until the full KKT test passes.
    """
    n = len(theta)
    support = list(np.nonzero(theta > 0)[0])
    for _ in range(3 * n):
        if not support:
            return None
        idx = np.array(support)
        s = idx.size
        A = np.zeros((s + 1, s + 1))
        A[:s, :s] = eta * Q[np.ix_(idx, idx)]
        A[:s, s] = -1.0
        A[s, :s] = 1.0
        rhs = np.concatenate([-alpha[idx], [1.0]])
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        th = sol[:s]
        if np.any(th < 0):
            support = [i for i, v in zip(support, th) if v > 0]
            continue
        cand = np.zeros(n)
        cand[idx] = th
        total = cand.sum()
        if not total > 0:
            return None
        cand /= total
        grad = eta * (Q @ cand) + alpha
        if kkt_residual(cand, grad) <= tol:
            return cand
        lam = float(cand @ grad)
        outside = np.setdiff1d(np.arange(n), idx)
        if outside.size == 0:
            return None
        j = outside[np.argmin(grad[outside])]
        if grad[j] >= lam:
            return None
        support.append(int(j))
    return None


def solve_dmp(G, alpha, eta: float, tol: float = 1e-10, max_iter: int = 10_000,
              theta0=None) -> DmpSolution:
    """Minimize the dual master objective over the simplex.

    ``G`` holds one subgradient per row. Raises DmpNotConverged (carrying the
    best iterate) if the residual is still above ``tol`` after ``max_iter`` steps.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    n = G.shape[0]
    if n == 0:
        raise ContractError("empty bundle")
    if alpha.shape != (n,):
        raise ContractError("one linearization error per subgradient is required")
    if not eta > 0 or not tol > 0:
        raise ContractError("eta and tol must be positive")

    Q = G @ G.T

    def f(th):
        return 0.5 * eta * float(th @ Q @ th) + float(alpha @ th)

    def finish(th, res, it):
        w, sigma = aggregate(th, G, alpha)
        ww = float(w @ w)
        return DmpSolution(th, w, sigma, 0.5 * eta * ww + sigma, eta * ww + sigma, res, it)

    if n == 1:
        th = np.ones(1)
        return finish(th, 0.0, 0)

    if theta0 is None:
        theta = np.full(n, 1.0 / n)
    else:
        theta = project_simplex(np.asarray(theta0, dtype=float))
    L = eta * max(float(np.linalg.eigvalsh(Q)[-1]), 1e-300)
    y, t = theta.copy(), 1.0
    f_theta = f(theta)
    best, best_res = theta, np.inf
    accepted = 0
    for it in range(1, max_iter + 1):
        theta_new = project_simplex(y - (eta * (Q @ y) + alpha) / L)
        f_new = f(theta_new)
        if f_new > f_theta and t > 1.0:
            # momentum overshot: restart from a plain projected gradient step
            y, t = theta.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = theta_new + ((t - 1.0) / t_new) * (theta_new - theta)
        theta, f_theta, t = theta_new, f_new, t_new
        accepted += 1
        if accepted % 10 == 1:
            res = kkt_residual(theta, eta * (Q @ theta) + alpha)
            if res < best_res:
                best, best_res = theta.copy(), res
            if res <= tol:
                return finish(theta, res, it)
            polished = _polish(Q, alpha, eta, theta, tol)
            if polished is not None:
                return finish(polished, kkt_residual(polished, eta * (Q @ polished) + alpha), it)
    polished = _polish(Q, alpha, eta, best, tol)
    if polished is not None:
        return finish(polished, kkt_residual(polished, eta * (Q @ polished) + alpha), max_iter)
    raise DmpNotConverged(finish(best, best_res, max_iter))


def stopping_test(w, sigma: float, eta_star: float, eps: float, center_value: float) -> bool:
    """eta* ||w||^2 + sigma <= eps * max(1, |phi(center)|)."""
    if not eta_star > 0 or not eps > 0:
        raise ContractError("eta_star and eps must be positive")
    if sigma < -1e-9:
        raise ContractError(f"aggregated linearization error is negative ({sigma})")
    w = np.asarray(w, dtype=float)
    return eta_star * float(w @ w) + sigma <= eps * max(1.0, abs(center_value))


def predicted_quantities(solution: DmpSolution, eta: float, eta_star: float):
    """Return (v_star, eps_star, quad, lin) used by the long-term eta strategies."""
    if not eta > 0 or not eta_star > 0:
        raise ContractError("eta and eta_star must be positive")
    ww = float(solution.w @ solution.w)
    sigma = solution.sigma
    return eta * ww + sigma, sigma + eta_star * ww, 0.5 * eta_star * ww, sigma
