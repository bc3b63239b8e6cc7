"""Lagrangian-dual oracles for multi-commodity network design and generalized assignment.

Each oracle returns the Lagrangian bound LR(pi) together with a subgradient.
``make_min_oracle`` wraps a problem into a scaled minimization objective that
every solver in the package consumes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class InstanceFormatError(ValueError):
    """Raised by the instance loader; the message names the offending field."""


# ---------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class Arc:
    tail: int
    head: int
    capacity: float
    fixed: float
    routing: tuple[float, ...]


@dataclass(frozen=True)
class Commodity:
    origin: int
    dest: int
    volume: int


@dataclass(frozen=True)
class McndInstance:
    nodes: int
    arcs: tuple[Arc, ...]
    commodities: tuple[Commodity, ...]

    @property
    def dimension(self) -> int:
        return self.nodes * len(self.commodities)

    def supply(self) -> np.ndarray:
        """b[i, k]: +q at the origin, -q at the destination."""
        b = np.zeros((self.nodes, len(self.commodities)))
        for k, com in enumerate(self.commodities):
            b[com.origin, k] += com.volume
            b[com.dest, k] -= com.volume
        return b

    def to_dict(self) -> dict:
        return {
            "type": "mcnd",
            "nodes": self.nodes,
            "arcs": [
                {"tail": a.tail, "head": a.head, "capacity": a.capacity,
                 "fixed": a.fixed, "routing": list(a.routing)}
                for a in self.arcs
            ],
            "commodities": [
                {"origin": c.origin, "dest": c.dest, "volume": c.volume}
                for c in self.commodities
            ],
        }


@dataclass(frozen=True)
class GapInstance:
    profits: np.ndarray  # items x bins
    weights: np.ndarray  # items x bins, positive integers
    capacities: np.ndarray  # bins

    @property
    def n_items(self) -> int:
        return self.profits.shape[0]

    @property
    def n_bins(self) -> int:
        return self.profits.shape[1]

    @property
    def dimension(self) -> int:
        return self.n_items

    def to_dict(self) -> dict:
        return {
            "type": "gap",
            "profits": self.profits.tolist(),
            "weights": self.weights.tolist(),
            "capacities": self.capacities.tolist(),
        }


Instance = McndInstance | GapInstance


def check_mcnd(inst: McndInstance) -> None:
    """Raise InstanceFormatError if ``inst`` breaks a structural invariant."""
    n, K = inst.nodes, len(inst.commodities)
    if n < 1:
        raise InstanceFormatError("nodes: must be >= 1")
    seen = set()
    for idx, a in enumerate(inst.arcs):
        where = f"arcs[{idx}]"
        if not (0 <= a.tail < n and 0 <= a.head < n):
            raise InstanceFormatError(f"{where}: endpoint out of range")
        if a.tail == a.head:
            raise InstanceFormatError(f"{where}: self loop")
        if (a.tail, a.head) in seen:
            raise InstanceFormatError(f"{where}: duplicate arc ({a.tail},{a.head})")
        seen.add((a.tail, a.head))
        if not a.capacity > 0:
            raise InstanceFormatError(f"{where}.capacity: must be > 0")
        if not a.fixed > 0:
            raise InstanceFormatError(f"{where}.fixed: must be > 0")
        if len(a.routing) != K:
            raise InstanceFormatError(f"{where}.routing: expected {K} entries, got {len(a.routing)}")
        if any(not r > 0 for r in a.routing):
            raise InstanceFormatError(f"{where}.routing: costs must be > 0")
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a in inst.arcs:
        adj[a.tail].append(a.head)
    for k, c in enumerate(inst.commodities):
        where = f"commodities[{k}]"
        if not (0 <= c.origin < n and 0 <= c.dest < n):
            raise InstanceFormatError(f"{where}: endpoint out of range")
        if c.origin == c.dest:
            raise InstanceFormatError(f"{where}: origin equals destination")
        if int(c.volume) != c.volume or c.volume < 1:
            raise InstanceFormatError(f"{where}.volume: must be a positive integer")
        if c.dest not in _reachable(adj, c.origin):
            raise InstanceFormatError(f"{where}: no path from {c.origin} to {c.dest}")


def check_gap(inst: GapInstance) -> None:
    p, w, c = inst.profits, inst.weights, inst.capacities
    if p.ndim != 2 or w.shape != p.shape:
        raise InstanceFormatError("weights: shape must match profits (items x bins)")
    if c.shape != (p.shape[1],):
        raise InstanceFormatError(f"capacities: expected {p.shape[1]} entries, got {c.shape}")
    if np.any(p < 0):
        raise InstanceFormatError("profits: must be nonnegative")
    if np.any(w < 1):
        raise InstanceFormatError("weights: must be >= 1")
    if np.any(c < 0):
        raise InstanceFormatError("capacities: must be >= 0")
    for name, arr in (("weights", w), ("capacities", c)):
        if not np.all(arr == np.round(arr)):
            raise InstanceFormatError(f"{name}: must be integers")


def _reachable(adj: dict[int, list[int]], src: int) -> set[int]:
    seen, stack = {src}, [src]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def _bfs_path(adj: dict[int, list[int]], src: int, dst: int) -> list[tuple[int, int]]:
    parent = {src: None}
    queue = [src]
    for u in queue:
        if u == dst:
            break
        for v in adj[u]:
            if v not in parent:
                parent[v] = u
                queue.append(v)
    path, v = [], dst
    while parent[v] is not None:
        path.append((parent[v], v))
        v = parent[v]
    return path[::-1]


def instance_from_dict(d: dict) -> Instance:
    kind = d.get("type")
    try:
        if kind == "mcnd":
            inst = McndInstance(
                nodes=int(d["nodes"]),
                arcs=tuple(
                    Arc(int(a["tail"]), int(a["head"]), float(a["capacity"]),
                        float(a["fixed"]), tuple(float(r) for r in a["routing"]))
                    for a in d["arcs"]
                ),
                commodities=tuple(
                    Commodity(int(c["origin"]), int(c["dest"]), _as_int(c["volume"], "volume"))
                    for c in d["commodities"]
                ),
            )
            check_mcnd(inst)
            return inst
        if kind == "gap":
            w = np.asarray(d["weights"], dtype=float)
            c = np.asarray(d["capacities"], dtype=float)
            for name, arr in (("weights", w), ("capacities", c)):
                if not np.all(arr == np.round(arr)):
                    raise InstanceFormatError(f"{name}: real-valued entries are not supported")
            inst = GapInstance(
                profits=np.asarray(d["profits"], dtype=float),
                weights=w.astype(np.int64),
                capacities=c.astype(np.int64),
            )
            check_gap(inst)
            return inst
    except KeyError as exc:
        raise InstanceFormatError(f"missing field {exc.args[0]!r}") from None
    raise InstanceFormatError(f"type: unknown instance type {kind!r}")


def _as_int(x, name: str) -> int:
    if float(x) != int(float(x)):
        raise InstanceFormatError(f"{name}: must be an integer, got {x!r}")
    return int(float(x))


def load_instance(path: str | Path) -> Instance:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    try:
        return instance_from_dict(d)
    except InstanceFormatError as exc:
        raise InstanceFormatError(f"{path}: {exc}") from None


def save_instance(inst: Instance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(inst.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# MCND


def mcnd_arc_relaxation(fixed_cost, capacity, reduced_costs, volumes):
    """Solve one arc subproblem: open the arc or not, then a continuous knapsack.

    Commodities with negative reduced cost are loaded most-negative first until
    the capacity is used up. Returns ``(value, flows)`` where ``value`` is
    ``min(0, fixed_cost + knapsack cost)``.
    """
    w = np.asarray(reduced_costs, dtype=float)
    q = np.asarray(volumes, dtype=float)
    if w.shape != q.shape or w.ndim != 1:
        raise ContractError("reduced_costs and volumes must be 1-D of equal length")
    if not capacity > 0:
        raise ContractError("capacity must be positive")
    flows = np.zeros_like(w)
    order = np.argsort(w, kind="stable")
    room = float(capacity)
    cost = float(fixed_cost)
    for k in order:
        if w[k] >= 0 or room <= 0:
            break
        x = min(q[k], room)
        flows[k] = x
        room -= x
        cost += w[k] * x
    if cost >= 0:
        return 0.0, np.zeros_like(w)
    return cost, flows


class _McndTables:
    """Dense arrays derived once per instance for the vectorized evaluator."""

    def __init__(self, inst: McndInstance):
        K = len(inst.commodities)
        self.n, self.K = inst.nodes, K
        self.tail = np.array([a.tail for a in inst.arcs], dtype=np.int64)
        self.head = np.array([a.head for a in inst.arcs], dtype=np.int64)
        self.cap = np.array([a.capacity for a in inst.arcs], dtype=float)
        self.fixed = np.array([a.fixed for a in inst.arcs], dtype=float)
        self.routing = np.array([a.routing for a in inst.arcs], dtype=float).reshape(len(inst.arcs), K)
        self.volume = np.array([c.volume for c in inst.commodities], dtype=float)
        origin = np.array([c.origin for c in inst.commodities], dtype=np.int64)
        dest = np.array([c.dest for c in inst.commodities], dtype=np.int64)
        # commodity k may use arc (i,j) unless j is its origin or i its destination
        self.allowed = (self.head[:, None] != origin[None, :]) & (self.tail[:, None] != dest[None, :])
        self.b = inst.supply()


def _mcnd_lr(tab: _McndTables, pi: np.ndarray) -> tuple[float, np.ndarray]:
    P = pi.reshape(tab.n, tab.K)
    w = tab.routing - P[tab.tail] + P[tab.head]
    w = np.where(tab.allowed & (w < 0), w, 0.0)
    order = np.argsort(w, axis=1, kind="stable")
    ws = np.take_along_axis(w, order, axis=1)
    qs = np.where(ws < 0, tab.volume[order], 0.0)
    before = np.cumsum(qs, axis=1) - qs
    xs = np.clip(tab.cap[:, None] - before, 0.0, qs)
    cost = tab.fixed + np.sum(ws * xs, axis=1)
    open_ = cost < 0
    flows = np.zeros_like(w)
    np.put_along_axis(flows, order, xs, axis=1)
    flows[~open_] = 0.0
    value = float(np.sum(np.where(open_, cost, 0.0)) + np.sum(P * tab.b))
    # d LR / d pi_i^k = b_i^k - outflow_i^k + inflow_i^k
    grad = tab.b.copy()
    np.subtract.at(grad, tab.tail, flows)
    np.add.at(grad, tab.head, flows)
    return value, grad.ravel()


def mcnd_lagrangian(inst: McndInstance, pi) -> tuple[float, np.ndarray]:
    """Return ``(LR(pi), subgradient of LR)``; pi is indexed node-major, (node, commodity)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (inst.dimension,):
        raise ContractError(f"multiplier dimension {pi.shape} != ({inst.dimension},)")
    return _mcnd_lr(_McndTables(inst), pi)


# ---------------------------------------------------------------------------
# GAP


def gap_bin_knapsack(adjusted_profits, weights, capacity):
    """0-1 knapsack by dynamic programming over integer capacity.

    Items with nonpositive profit are never taken. Among optimal selections the
    lexicographically smallest one is returned.
    """
    p = np.asarray(adjusted_profits, dtype=float)
    w = np.asarray(weights)
    if p.shape != w.shape or p.ndim != 1:
        raise ContractError("adjusted_profits and weights must be 1-D of equal length")
    if np.any(w < 1):
        raise ContractError("weights must be positive integers")
    if capacity < 0:
        raise ContractError("capacity must be nonnegative")
    cap = int(capacity)
    n = p.size
    w = w.astype(np.int64)
    # suffix table: best[i, c] = best value using items i.. with capacity c
    best = np.zeros((n + 1, cap + 1))
    for i in range(n - 1, -1, -1):
        best[i] = best[i + 1]
        if p[i] > 0 and w[i] <= cap:
            take = best[i + 1, : cap + 1 - w[i]] + p[i]
            best[i, w[i]:] = np.maximum(best[i + 1, w[i]:], take)
    sel = np.zeros(n, dtype=bool)
    c = cap
    for i in range(n):
        if best[i, c] != best[i + 1, c]:
            sel[i] = True
            c -= w[i]
    return float(best[0, cap]), sel


def _gap_lr(inst: GapInstance, pi: np.ndarray) -> tuple[float, np.ndarray]:
    """All bins solved together: the DP tables are stacked along the bin axis."""
    p = inst.profits - pi[:, None]
    w = inst.weights
    caps = inst.capacities.astype(np.int64)
    n, J = p.shape
    C = int(caps.max()) if J else 0
    jj = np.arange(J)
    cols = np.arange(C + 1)
    best = np.zeros((n + 1, J, C + 1))
    for i in range(n - 1, -1, -1):
        src = cols[None, :] - w[i][:, None]
        ok = (src >= 0) & (p[i] > 0)[:, None]
        cand = best[i + 1, jj[:, None], np.maximum(src, 0)] + p[i][:, None]
        best[i] = np.where(ok, np.maximum(best[i + 1], cand), best[i + 1])
    x = np.zeros((n, J), dtype=bool)
    c = caps.copy()
    for i in range(n):
        take = best[i, jj, c] != best[i + 1, jj, c]
        x[i] = take
        c = c - np.where(take, w[i], 0)
    value = float(best[0, jj, caps].sum() + pi.sum())
    grad = 1.0 - x.sum(axis=1)
    return value, grad.astype(float)


def gap_lagrangian(inst: GapInstance, pi) -> tuple[float, np.ndarray]:
    """Return ``(LR(pi), subgradient of LR)`` for the item-assignment relaxation."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (inst.dimension,):
        raise ContractError(f"multiplier dimension {pi.shape} != ({inst.dimension},)")
    if np.any(pi < 0):
        raise ContractError("GAP multipliers must be nonnegative")
    return _gap_lr(inst, pi)


# ---------------------------------------------------------------------------
# oracle handle


@dataclass(frozen=True)
class Evaluation:
    value: float  # scaled objective, minimization orientation
    subgradient: np.ndarray
    raw_lr_value: float


def mcnd_evaluate(inst: McndInstance, pi, scale: float = 1.0) -> Evaluation:
    """LR is maximized for MCND, so the minimization objective is -LR/scale."""
    lr, g = mcnd_lagrangian(inst, pi)
    return Evaluation(-lr / scale, -g / scale, lr)


def gap_evaluate(inst: GapInstance, pi, scale: float = 1.0) -> Evaluation:
    """LR is an upper bound for GAP and is minimized directly: objective LR/scale."""
    lr, g = gap_lagrangian(inst, pi)
    return Evaluation(lr / scale, g / scale, lr)


@dataclass
class OracleHandle:
    """Scaled minimization oracle over a Lagrangian dual.

    ``sense`` records how LR is optimized: "max" for MCND (a lower bound to be
    raised) and "min" for GAP (an upper bound to be lowered).
    """

    evaluate_raw: Callable[[np.ndarray], tuple[float, np.ndarray]]
    dimension: int
    sign_constrained: bool
    scale: float
    sense: str
    calls: int = field(default=0, compare=False)

    def evaluate(self, pi) -> Evaluation:
        pi = np.asarray(pi, dtype=float)
        if pi.shape != (self.dimension,):
            raise ContractError(f"multiplier dimension {pi.shape} != ({self.dimension},)")
        self.calls += 1
        lr, g = self.evaluate_raw(pi)
        sign = -1.0 if self.sense == "max" else 1.0
        return Evaluation(sign * lr / self.scale, sign * g / self.scale, lr)

    def project(self, pi: np.ndarray) -> np.ndarray:
        return np.maximum(pi, 0.0) if self.sign_constrained else pi

    def raw_to_objective(self, lr: float) -> float:
        return (-lr if self.sense == "max" else lr) / self.scale


def raw_oracle(problem: Instance) -> tuple[Callable, int, bool, str]:
    if isinstance(problem, McndInstance):
        tab = _McndTables(problem)

        def ev(pi):
            return _mcnd_lr(tab, pi)
        return ev, problem.dimension, False, "max"
    if isinstance(problem, GapInstance):
        def ev(pi):
            if np.any(pi < 0):
                raise ContractError("GAP multipliers must be nonnegative")
            return _gap_lr(problem, pi)
        return ev, problem.dimension, True, "min"
    raise TypeError(f"unsupported problem type {type(problem).__name__}")


def make_min_oracle(problem: Instance, pi0=None, scale: float | None = None) -> OracleHandle:
    """Wrap ``problem`` as phi(pi) = -+LR(pi)/s with s = ||g_LR(pi0)||_2 (s = 1 if that is 0).

    ``pi0`` defaults to the zero vector. Passing ``scale`` skips the probe.
    """
    ev, dim, signed, sense = raw_oracle(problem)
    if scale is None:
        p0 = np.zeros(dim) if pi0 is None else np.asarray(pi0, dtype=float)
        _, g0 = ev(p0)
        scale = float(np.linalg.norm(g0))
        if scale == 0.0:
            scale = 1.0
    return OracleHandle(ev, dim, signed, float(scale), sense)


def function_oracle(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], dimension: int,
                    sign_constrained: bool = False) -> OracleHandle:
    """Treat ``fn`` (returning value and subgradient) as an already-scaled minimization oracle."""
    return OracleHandle(fn, dimension, sign_constrained, 1.0, "min")


def gap_percent(reference_lr: float, bound: float, sense: str) -> float:
    """Percentage gap of ``bound`` relative to the reference, oriented so that 0 is best."""
    if sense == "max":
        return 100.0 * (reference_lr - bound) / abs(reference_lr)
    return 100.0 * (bound - reference_lr) / abs(reference_lr)


# ---------------------------------------------------------------------------
# generators


@dataclass
class McndParams:
    nodes: int = 12
    arcs: int = 40
    commodities: int = 10
    capacity: tuple[float, float] = (10.0, 40.0)
    fixed: tuple[float, float] = (20.0, 80.0)
    routing: tuple[float, float] = (1.0, 10.0)
    volume: tuple[int, int] = (1, 20)


def generate_mcnd(params: McndParams, seed: int) -> McndInstance:
    n, m = params.nodes, params.arcs
    if n < 2:
        raise ContractError("need at least 2 nodes")
    if m < n - 1:
        raise ContractError("arcs must be >= nodes - 1")
    if m > n * (n - 1):
        raise ContractError(f"arcs={m} exceeds n(n-1)={n * (n - 1)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pairs: list[tuple[int, int]] = []
    present: set[tuple[int, int]] = set()

    def add(i, j):
        if (i, j) not in present:
            present.add((i, j))
            pairs.append((i, j))

    # random spanning tree oriented away from the first node in ``order``
    for t in range(1, n):
        add(int(order[rng.integers(t)]), int(order[t]))

    coms = []
    for _ in range(params.commodities):
        o, d = rng.choice(n, size=2, replace=False)
        coms.append((int(o), int(d), int(rng.integers(params.volume[0], params.volume[1] + 1))))

    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, j in pairs:
        adj[i].append(j)
    for o, d, _ in coms:
        if d not in _reachable(adj, o):
            if len(pairs) < m:
                add(o, d)
                adj[o].append(d)
            else:
                break
    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in present]
    rng.shuffle(all_pairs)
    for i, j in all_pairs[: max(0, m - len(pairs))]:
        add(i, j)
        adj[i].append(j)
    # if the arc budget ran out before every commodity was routable, redraw endpoints
    fixed_coms = []
    for o, d, q in coms:
        while d not in _reachable(adj, o):
            o, d = (int(v) for v in rng.choice(n, size=2, replace=False))
        fixed_coms.append((o, d, q))

    # capacities cover one BFS route per commodity, so a feasible flow always exists
    load = {pr: 0.0 for pr in pairs}
    for o, d, q in fixed_coms:
        for pr in _bfs_path(adj, o, d):
            load[pr] += q
    K = len(fixed_coms)
    arcs = tuple(
        Arc(i, j,
            capacity=max(float(np.round(rng.uniform(*params.capacity), 2)), load[(i, j)]),
            fixed=float(np.round(rng.uniform(*params.fixed), 2)),
            routing=tuple(float(v) for v in np.round(rng.uniform(*params.routing, size=K), 2)))
        for i, j in pairs
    )
    inst = McndInstance(n, arcs, tuple(Commodity(o, d, q) for o, d, q in fixed_coms))
    check_mcnd(inst)
    return inst


@dataclass
class GapParams:
    items: int = 100
    bins: int = 10
    profit: tuple[int, int] = (10, 50)
    weight: tuple[int, int] = (5, 25)
    tightness: float = 0.8


def generate_gap(params: GapParams, seed: int) -> GapInstance:
    if not 0 < params.tightness <= 1:
        raise ContractError("tightness must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    I, J = params.items, params.bins
    p = rng.integers(params.profit[0], params.profit[1] + 1, size=(I, J))
    w = rng.integers(params.weight[0], params.weight[1] + 1, size=(I, J))
    caps = gap_capacities(w, params.tightness)
    inst = GapInstance(p.astype(float), w.astype(np.int64), caps)
    check_gap(inst)
    return inst


def gap_capacities(weights: np.ndarray, tightness: float) -> np.ndarray:
    """c_j = round(rho * sum_i mean_j(w_ij) / |J|), identical for every bin."""
    I, J = weights.shape
    c = int(round(tightness * float(weights.mean(axis=1).sum()) / J))
    return np.full(J, c, dtype=np.int64)


def random_multipliers(rng: np.random.Generator, dim: int, sign_constrained: bool,
                       scale: float = 10.0) -> np.ndarray:
    pi = rng.normal(0.0, scale, size=dim)
    return np.abs(pi) if sign_constrained else pi
