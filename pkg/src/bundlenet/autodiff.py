"""A small reverse-mode differentiation tape over numpy arrays.

Only the operators the Bundle Network needs are provided. Values are scalars,
vectors or (for weights) matrices; broadcasting is limited to scalar-vector.
Every differentiable Value created by an op is recorded on its tape in creation
order, so ``backward`` simply walks the tape in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .master_problem import project_simplex
from .oracles import ContractError


class Tape:
    def __init__(self):
        self.nodes: list[Value] = []

    def __len__(self):
        return len(self.nodes)


class Value:
    """Array data plus the bookkeeping needed to push gradients to its parents."""

    __slots__ = ("data", "grad", "tape", "parents", "backward_fn", "is_param", "name")

    def __init__(self, data, tape: Tape | None = None, parents=(), backward_fn=None,
                 is_param: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.tape = tape
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.is_param or self.tape is not None

    def accumulate(self, g) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=float)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        kind = "param" if self.is_param else ("node" if self.tape is not None else "const")
        return f"Value({kind}, shape={self.shape})"


def constant(data) -> Value:
    """A non-differentiable leaf (oracle outputs, features, noise)."""
    return Value(np.array(data, dtype=float))


def parameter(data, name: str | None = None) -> Value:
    """A trainable leaf. ``data`` is shared, not copied, so updates are visible to the owner."""
    arr = data if isinstance(data, np.ndarray) and data.dtype == float else np.asarray(data, dtype=float)
    return Value(arr, is_param=True, name=name)


def _tape_of(*vals: Value) -> Tape | None:
    for v in vals:
        if v.tape is not None:
            return v.tape
    return None


def _node(data, parents, backward_fn, tape: Tape | None = None) -> Value:
    """Create a result Value. It is recorded only if some parent needs gradients."""
    if not any(p.requires_grad for p in parents):
        return Value(data)
    tape = tape or _tape_of(*parents)
    if tape is None:
        raise ContractError("operation on parameters needs a tape; wrap one input with on_tape()")
    out = Value(data, tape, parents, backward_fn)
    tape.nodes.append(out)
    return out


def on_tape(tape: Tape, v: Value) -> Value:
    """Identity node that attaches a parameter (or constant) to ``tape``."""
    def bw(out):
        v.accumulate(out.grad)
    if not v.requires_grad:
        return v
    out = Value(v.data, tape, (v,), bw)
    tape.nodes.append(out)
    return out


def _check_same(a: Value, b: Value, op: str):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (only scalar-vector broadcast occurs)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    raise ContractError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Value, b: Value) -> Value:
    if a.shape != b.shape and () not in (a.shape, b.shape):
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(out):
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))
    return _node(a.data + b.data, (a, b), bw)


def sub(a: Value, b: Value) -> Value:
    if a.shape != b.shape and () not in (a.shape, b.shape):
        raise ContractError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bw(out):
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(-out.grad, b.shape))
    return _node(a.data - b.data, (a, b), bw)


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def bw(out):
        a.accumulate(c * out.grad)
    return _node(c * a.data, (a,), bw)


def mul(a: Value, b: Value) -> Value:
    """Elementwise product; one side may be a scalar."""
    if a.shape != b.shape and () not in (a.shape, b.shape):
        raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(out):
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw)


def matvec(W: Value, x: Value) -> Value:
    if W.data.ndim != 2 or x.data.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ContractError(f"matvec: shape mismatch {W.shape} @ {x.shape}")

    def bw(out):
        if W.requires_grad:
            W.accumulate(np.outer(out.grad, x.data))
        x.accumulate(W.data.T @ out.grad)
    return _node(W.data @ x.data, (W, x), bw)


def dot(a: Value, b: Value) -> Value:
    _check_same(a, b, "dot")
    if a.data.ndim != 1:
        raise ContractError("dot expects vectors")

    def bw(out):
        a.accumulate(out.grad * b.data)
        b.accumulate(out.grad * a.data)
    return _node(np.dot(a.data, b.data), (a, b), bw)


def concat(values: list[Value]) -> Value:
    """Concatenate scalars and vectors into one vector."""
    values = list(values)
    if not values:
        raise ContractError("concat of nothing")
    parts = [np.atleast_1d(v.data) for v in values]
    if any(p.ndim != 1 for p in parts):
        raise ContractError("concat expects scalars or vectors")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            v.accumulate(out.grad[lo:hi].reshape(v.shape))
    return _node(np.concatenate(parts), values, bw)


def slice_(a: Value, start: int, stop: int) -> Value:
    if a.data.ndim != 1 or not 0 <= start <= stop <= a.shape[0]:
        raise ContractError(f"slice [{start}:{stop}] out of range for {a.shape}")

    def bw(out):
        g = np.zeros(a.shape)
        g[start:stop] = out.grad
        a.accumulate(g)
    return _node(a.data[start:stop], (a,), bw)


def index(a: Value, i: int) -> Value:
    if a.data.ndim != 1 or not -a.shape[0] <= i < a.shape[0]:
        raise ContractError(f"index {i} out of range for {a.shape}")

    def bw(out):
        g = np.zeros(a.shape)
        g[i] = out.grad
        a.accumulate(g)
    return _node(a.data[i], (a,), bw)


def stack(values: list[Value]) -> Value:
    """Stack equal-length vectors as the rows of a matrix."""
    values = list(values)
    if not values:
        raise ContractError("stack of nothing")
    shape = values[0].shape
    if any(v.shape != shape for v in values) or len(shape) != 1:
        raise ContractError("stack expects vectors of equal length")

    def bw(out):
        for i, v in enumerate(values):
            v.accumulate(out.grad[i])
    return _node(np.stack([v.data for v in values]), values, bw)


def sum_(a: Value) -> Value:
    def bw(out):
        a.accumulate(np.full(a.shape, float(out.grad)))
    return _node(np.sum(a.data), (a,), bw)


def sigmoid(a: Value) -> Value:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(out):
        a.accumulate(out.grad * s * (1.0 - s))
    return _node(s, (a,), bw)


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)

    def bw(out):
        a.accumulate(out.grad * (1.0 - y * y))
    return _node(y, (a,), bw)


def relu(a: Value) -> Value:
    mask = a.data > 0

    def bw(out):
        a.accumulate(out.grad * mask)
    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(a: Value) -> Value:
    def bw(out):
        a.accumulate(out.grad * 0.5 * (1.0 + np.tanh(0.5 * a.data)))
    return _node(_softplus(a.data), (a,), bw)


def exp(a: Value) -> Value:
    y = np.exp(a.data)

    def bw(out):
        a.accumulate(out.grad * y)
    return _node(y, (a,), bw)


def norm2(a: Value) -> Value:
    """Squared Euclidean norm."""
    def bw(out):
        a.accumulate(2.0 * out.grad * a.data)
    return _node(np.dot(a.data.ravel(), a.data.ravel()), (a,), bw)


def _softmax(x):
    z = np.exp(x - np.max(x))
    return z / z.sum()


def softmax(a: Value) -> Value:
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise ContractError("softmax expects a non-empty vector")
    p = _softmax(a.data)

    def bw(out):
        a.accumulate(p * (out.grad - np.dot(out.grad, p)))
    return _node(p, (a,), bw)


def softmin(a: Value) -> Value:
    return softmax(scale(a, -1.0)) if a.requires_grad else constant(_softmax(-a.data))


def sparsemax(a: Value) -> Value:
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise ContractError("sparsemax expects a non-empty vector")
    p = project_simplex(a.data)
    support = p > 0

    def bw(out):
        g = np.zeros(a.shape)
        g[support] = out.grad[support] - out.grad[support].mean()
        a.accumulate(g)
    return _node(p, (a,), bw)


def gaussian_reparam(mu: Value, sigma: Value, eps) -> Value:
    """mu + sigma * eps with ``eps`` an external (constant) noise draw."""
    eps = np.asarray(eps.data if isinstance(eps, Value) else eps, dtype=float)
    _check_same(mu, sigma, "gaussian_reparam")
    if eps.shape != mu.shape:
        raise ContractError("noise shape mismatch")

    def bw(out):
        mu.accumulate(out.grad)
        sigma.accumulate(out.grad * eps)
    return _node(mu.data + sigma.data * eps, (mu, sigma), bw)


def linearized(x: Value, value: float, g) -> Value:
    """Scalar node with a given value whose gradient w.r.t. ``x`` is the fixed vector ``g``.

    Used for oracle values: the forward value comes from the oracle and the
    backward pass uses the stored subgradient, with no differentiation of the oracle.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != x.shape:
        raise ContractError("subgradient shape does not match the point")

    def bw(out):
        x.accumulate(out.grad * g)
    return _node(float(value), (x,), bw)


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(root: Value) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every parameter reachable from ``root``."""
    if root.data.shape != ():
        raise ContractError("backward needs a scalar root")
    if root.tape is None:
        return
    tape = root.tape
    for node in tape.nodes:
        node.grad = None
    root.grad = np.array(1.0)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> dict[str, np.ndarray]:
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    n = global_norm(grads)
    if n <= max_norm:
        return grads
    f = max_norm / n
    return {k: g * f for k, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_param_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                      eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step, applied in place to ``params``.

    Parameters without a gradient entry are treated as having gradient zero.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
