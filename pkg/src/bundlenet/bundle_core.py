"""Bundle bookkeeping: entries, linearization errors, cutting-plane model, pruning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .oracles import ContractError


@dataclass
class BundleEntry:
    g: np.ndarray
    alpha: float
    value: float  # objective at the point that produced g
    point: np.ndarray
    last_active: int = 0
    key: object = None  # latent key in network mode


@dataclass
class BundleState:
    center: np.ndarray
    center_value: float
    entries: list[BundleEntry] = field(default_factory=list)
    iteration: int = 0

    @property
    def dimension(self) -> int:
        return self.center.shape[0]

    def __len__(self) -> int:
        return len(self.entries)

    def subgradients(self) -> np.ndarray:
        return np.array([e.g for e in self.entries])

    def alphas(self) -> np.ndarray:
        return np.array([e.alpha for e in self.entries])


def linearization_error(center, center_value, point, value, g) -> float:
    """alpha = f(center) - f(point) - g.(center - point)."""
    return float(center_value - value - np.dot(g, np.asarray(center) - np.asarray(point)))


def append(state: BundleState, entry: BundleEntry) -> BundleState:
    if entry.g.shape != (state.dimension,):
        raise ContractError(f"entry dimension {entry.g.shape} != ({state.dimension},)")
    state.entries.append(entry)
    return state


def translate_errors(state: BundleState, new_center, new_center_value: float) -> BundleState:
    """Move the center and shift every alpha accordingly (incremental update)."""
    new_center = np.asarray(new_center, dtype=float)
    if new_center.shape != state.center.shape:
        raise ContractError("new center dimension mismatch")
    shift = new_center - state.center
    dv = new_center_value - state.center_value
    for e in state.entries:
        e.alpha = e.alpha + dv - float(np.dot(e.g, shift))
    state.center = new_center
    state.center_value = float(new_center_value)
    return state


def recompute_errors(state: BundleState) -> np.ndarray:
    """From-scratch alphas relative to the current center (for checks)."""
    return np.array([
        linearization_error(state.center, state.center_value, e.point, e.value, e.g)
        for e in state.entries
    ])


def model_value(state: BundleState, d) -> float:
    """Cutting-plane model of phi(center + d) - phi(center): max_i g_i.d - alpha_i."""
    if not state.entries:
        raise ContractError("model of an empty bundle")
    d = np.asarray(d, dtype=float)
    if d.shape != (state.dimension,):
        raise ContractError("direction dimension mismatch")
    return float(np.max(state.subgradients() @ d - state.alphas()))


def mark_active(state: BundleState, theta, tol: float = 1e-12) -> None:
    for e, th in zip(state.entries, theta):
        if th > tol:
            e.last_active = state.iteration


def prune_unused(state: BundleState, window: int = 20) -> BundleState:
    """Drop entries whose weight has been zero for more than ``window`` iterations.

    The newest entry always survives, so the bundle never becomes empty.
    """
    if window < 1:
        raise ContractError("prune window must be >= 1")
    if len(state.entries) <= 1:
        return state
    cutoff = state.iteration - window
    newest = state.entries[-1]
    state.entries = [e for e in state.entries[:-1] if e.last_active >= cutoff] + [newest]
    return state
