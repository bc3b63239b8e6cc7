"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from bundlenet.oracles import Arc, Commodity, GapInstance, McndInstance, check_mcnd, InstanceFormatError


def knapsack_vertices(q, c):
    """All vertices of {0 <= x <= q, sum x <= c}: a set at its bounds plus at most one partial item."""
    n = len(q)
    verts = []
    for mask in itertools.product((0, 1), repeat=n):
        x = np.array([q[k] if mask[k] else 0.0 for k in range(n)], dtype=float)
        if x.sum() <= c + 1e-12:
            verts.append(x)
        room = c - x.sum()
        for j in range(n):
            if not mask[j] and 0 < room < q[j]:
                y = x.copy()
                y[j] = room
                verts.append(y)
    return verts


def brute_mcnd_lr(inst: McndInstance, pi) -> float:
    """LR(pi) by enumerating y in {0,1} and every knapsack vertex on every arc."""
    K = len(inst.commodities)
    P = np.asarray(pi, dtype=float).reshape(inst.nodes, K)
    total = float(np.sum(P * inst.supply()))
    for a in inst.arcs:
        allowed = [k for k, com in enumerate(inst.commodities)
                   if a.head != com.origin and a.tail != com.dest]
        w = [a.routing[k] - P[a.tail, k] + P[a.head, k] for k in allowed]
        q = [inst.commodities[k].volume for k in allowed]
        best = 0.0  # arc closed
        for x in knapsack_vertices(q, a.capacity):
            best = min(best, a.fixed + float(np.dot(w, x)) if len(w) else a.fixed)
        total += best
    return total


def brute_gap_lr(inst: GapInstance, pi) -> float:
    """LR(pi) by enumerating every item subset of every bin."""
    pi = np.asarray(pi, dtype=float)
    n, J = inst.profits.shape
    total = float(pi.sum())
    for j in range(J):
        best = 0.0
        for mask in itertools.product((0, 1), repeat=n):
            m = np.array(mask, dtype=bool)
            if inst.weights[m, j].sum() <= inst.capacities[j]:
                best = max(best, float((inst.profits[m, j] - pi[m]).sum()))
        total += best
    return total


def random_micro_mcnd(rng, max_arcs=3, max_coms=4, integer=True) -> McndInstance:
    """A small random MCND instance that satisfies the structural invariants."""
    while True:
        n = int(rng.integers(2, 5))
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        m = int(rng.integers(1, min(max_arcs, len(pairs)) + 1))
        chosen = [pairs[i] for i in rng.choice(len(pairs), size=m, replace=False)]
        K = int(rng.integers(1, max_coms + 1))
        coms = []
        for _ in range(K):
            o, d = chosen[int(rng.integers(m))]  # an arc endpoint pair guarantees a path
            coms.append(Commodity(int(o), int(d), int(rng.integers(1, 10))))
        num = (lambda lo, hi: float(rng.integers(lo, hi))) if integer else (lambda lo, hi: float(rng.uniform(lo, hi)))
        arcs = tuple(Arc(i, j, num(1, 20), num(1, 30), tuple(num(1, 10) for _ in range(K))) for i, j in chosen)
        inst = McndInstance(n, arcs, tuple(coms))
        try:
            check_mcnd(inst)
        except InstanceFormatError:
            continue
        return inst


def random_micro_gap(rng, max_bins=3, max_items=4) -> GapInstance:
    J = int(rng.integers(1, max_bins + 1))
    n = int(rng.integers(1, max_items + 1))
    return GapInstance(rng.integers(0, 20, size=(n, J)).astype(float),
                       rng.integers(1, 10, size=(n, J)).astype(np.int64),
                       rng.integers(0, 20, size=J).astype(np.int64))


def dmp_support_oracle(G, alpha, eta) -> float:
    """Exact DMP minimum by enumerating supports and solving each equality-constrained KKT system."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    n = G.shape[0]
    Q = eta * G @ G.T

    def f(th):
        return 0.5 * th @ Q @ th + alpha @ th
    best = min(f(np.eye(n)[i]) for i in range(n))
    for size in range(2, n + 1):
        for S in itertools.combinations(range(n), size):
            S = list(S)
            A = np.zeros((size + 1, size + 1))
            A[:size, :size] = Q[np.ix_(S, S)]
            A[:size, size] = -1.0
            A[size, :size] = 1.0
            rhs = np.concatenate([-alpha[S], [1.0]])
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
            th = np.zeros(n)
            th[S] = sol[:size]
            if np.all(th >= -1e-12) and abs(th.sum() - 1) < 1e-9:
                th = np.maximum(th, 0)
                th /= th.sum()
                best = min(best, f(th))
    return float(best)


def simplex_grid(n, step):
    """All points of the simplex in R^n with coordinates on a ``step`` grid."""
    m = int(round(1 / step))
    if n == 1:
        return np.ones((1, 1))
    pts = []
    for c in itertools.combinations(range(m + n - 1), n - 1):
        bars = (-1,) + c + (m + n - 1,)
        pts.append([bars[i + 1] - bars[i] - 1 for i in range(n)])
    return np.array(pts, dtype=float) / m


def lp_simplex_projection(z):
    """Simplex projection by bisection on the threshold tau of max(z - tau, 0)."""
    z = np.asarray(z, dtype=float)

    def proj(y):
        lo, hi = y.min() - 1.0, y.max()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.maximum(y - mid, 0).sum() > 1:
                lo = mid
            else:
                hi = mid
        return np.maximum(y - 0.5 * (lo + hi), 0)
    return proj(z)


def scripted_abs():
    """phi(pi) = |pi| in 1-D with subgradient sign(pi), sign(0) = 0."""
    def fn(p):
        return float(abs(p[0])), np.array([float(np.sign(p[0]))])
    return fn


def quadratic_oracle():
    """Smooth convex scripted oracle phi(p) = p'Ap/2 - b'p with exact gradients."""
    from bundlenet.oracles import function_oracle
    A = np.diag([1.0, 2.0, 3.0])
    b = np.array([1.0, -1.0, 0.5])
    return function_oracle(lambda p: (float(0.5 * p @ A @ p - b @ p), A @ p - b), 3)


def pipeline_fd_errors(T=3, h=1e-4, floor=1e-7, latent=2, hidden=3, seed=1, psi="softmax"):
    """Relative errors of the unrolled loss gradient against central differences.

    The perturbed rollouts replay the features and bundle subgradients of the
    base rollout, so weights act only through the taped operations.
    """
    from bundlenet import network as nw
    oracle = quadratic_oracle()
    cfg = nw.NetConfig(latent=latent, decoder_hidden=hidden)
    P = nw.init_params(cfg, seed)
    noise = np.random.default_rng(seed + 4)
    for k in P:
        P[k] = P[k] + 0.3 * noise.standard_normal(P[k].shape)
    pi0 = np.zeros(3)
    base = nw.rollout(P, oracle, pi0, T, cfg=cfg, psi=psi, record_times=False)
    grads = nw.gradients(base, nw.loss(base.trajectory, 0.999))
    hooks = nw.RolloutHooks(replay=base.record)

    def f(Q):
        r = nw.rollout(Q, oracle, pi0, T, cfg=cfg, psi=psi, hooks=hooks, record_times=False)
        return float(nw.loss(r.trajectory, 0.999).data)
    errs = []
    for k in P:
        for idx in np.ndindex(P[k].shape):
            keep = P[k][idx]
            P[k][idx] = keep + h
            up = f(P)
            P[k][idx] = keep - h
            down = f(P)
            P[k][idx] = keep
            fd = (up - down) / (2 * h)
            an = grads[k][idx]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), floor))
    return np.array(errs)
