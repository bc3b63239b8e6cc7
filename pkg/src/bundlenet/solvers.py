"""Proximal bundle method and the two subgradient baselines (halving descent, Adam).

All solvers minimize the scaled objective of an ``OracleHandle`` and record a
``Trace``: row 0 is the starting point, row t the t-th trial point. A budget of
``max_iter`` therefore costs at most ``max_iter + 1`` oracle calls.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import bundle_core as bc
from .eta_strategies import NULL, SERIOUS, EtaConfig, EtaState, long_term_gate, update_eta
from .master_problem import DmpNotConverged, predicted_quantities, solve_dmp, stopping_test
from .oracles import ContractError, OracleHandle

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    m: float = 0.001
    eps: float = 1e-6
    max_iter: int = 100
    eta: EtaConfig = field(default_factory=EtaConfig)
    prune_window: int = 20
    record_times: bool = True
    max_bundle_size: int | None = None  # test hook: keep only the newest entries

    def __post_init__(self):
        if not 0 < self.m < 1:
            raise ContractError("serious-step parameter m must lie in (0, 1)")
        if self.max_iter < 0:
            raise ContractError("max_iter must be >= 0")


@dataclass
class TraceRow:
    t: int
    value: float
    center_value: float
    raw_lr: float
    eta: float
    step: str
    wall_time: float


@dataclass
class Trace:
    method: str
    rows: list[TraceRow] = field(default_factory=list)
    termination: str = "budget"

    @property
    def best_value(self) -> float:
        return min(r.value for r in self.rows)

    def best_upto(self, t: int) -> TraceRow:
        """Row with the lowest objective among rows 0..t."""
        rows = self.rows[: t + 1]
        return min(rows, key=lambda r: r.value)

    def time_at(self, t: int) -> float:
        rows = self.rows[: t + 1]
        return rows[-1].wall_time

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.rows])

    def center_values(self) -> np.ndarray:
        return np.array([r.center_value for r in self.rows])


class SolverError(RuntimeError):
    """Wraps an oracle failure; ``trace`` holds the iterations completed so far."""

    def __init__(self, trace: Trace, cause: Exception):
        super().__init__(f"{trace.method} failed after {len(trace.rows)} evaluations: {cause}")
        self.trace = trace


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.start if self.enabled else 0.0


def _check_start(oracle: OracleHandle, pi0) -> np.ndarray:
    pi0 = np.array(pi0, dtype=float)
    if pi0.shape != (oracle.dimension,):
        raise ContractError(f"starting point dimension {pi0.shape} != ({oracle.dimension},)")
    if oracle.sign_constrained and np.any(pi0 < 0):
        raise ContractError("starting point must be nonnegative for sign-constrained multipliers")
    return pi0


def run_bundle(oracle: OracleHandle, pi0, config: SolverConfig | None = None,
               method: str | None = None) -> Trace:
    config = config or SolverConfig()
    pi0 = _check_start(oracle, pi0)
    ec = config.eta
    trace = Trace(method or f"bundle-{ec.kind}")
    clock = _Clock(config.record_times)
    try:
        ev = oracle.evaluate(pi0)
        state = bc.BundleState(pi0, ev.value)
        bc.append(state, bc.BundleEntry(ev.subgradient, 0.0, ev.value, pi0))
        eta_state = EtaState.initial(ec)
        trace.rows.append(TraceRow(0, ev.value, ev.value, ev.raw_lr_value, eta_state.eta, "n/a", clock()))
        theta_prev = None
        for t in range(1, config.max_iter + 1):
            state.iteration = t
            eta = eta_state.eta
            G, alpha = state.subgradients(), state.alphas()
            warm = theta_prev if theta_prev is not None and theta_prev.sum() > 0 else None
            try:
                sol = solve_dmp(G, alpha, eta, theta0=warm)
            except DmpNotConverged as exc:
                log.debug("iteration %d: %s", t, exc)
                sol = exc.solution
            bc.mark_active(state, sol.theta)
            if stopping_test(sol.w, max(sol.sigma, 0.0), ec.eta_star, config.eps, state.center_value):
                trace.termination = "stopped"
                break
            trial = oracle.project(state.center - eta * sol.w)
            ev = oracle.evaluate(trial)
            d = trial - state.center
            predicted = -bc.model_value(state, d)
            actual = state.center_value - ev.value
            alpha_new = bc.linearization_error(state.center, state.center_value, trial,
                                               ev.value, ev.subgradient)
            bc.append(state, bc.BundleEntry(ev.subgradient, alpha_new, ev.value, trial, last_active=t))
            serious = predicted > 0 and actual >= config.m * predicted
            if serious:
                bc.translate_errors(state, trial, ev.value)
            outcome = SERIOUS if serious else NULL
            v_star, eps_star, quad, lin = predicted_quantities(sol, eta, ec.eta_star)
            gates = long_term_gate(ec.kind, v_star, eps_star, quad, lin, ec.m_tilde, outcome)
            eta_state = update_eta(eta_state, ec, outcome, gates)
            weight = {id(e): th for e, th in zip(state.entries, np.append(sol.theta, 0.0))}
            bc.prune_unused(state, config.prune_window)
            if config.max_bundle_size is not None:
                state.entries = state.entries[-config.max_bundle_size:]
            theta_prev = np.array([weight[id(e)] for e in state.entries])
            trace.rows.append(TraceRow(t, ev.value, state.center_value, ev.raw_lr_value, eta, outcome, clock()))
    except (ContractError, DmpNotConverged):
        raise
    except Exception as exc:
        trace.termination = "error"
        raise SolverError(trace, exc) from exc
    return trace


def run_descent(oracle: OracleHandle, pi0, eta0: float, max_iter: int,
                record_times: bool = True) -> Trace:
    """Projected subgradient steps; eta halves after more than two non-improving steps."""
    if not eta0 > 0:
        raise ContractError("eta0 must be positive")
    pi = _check_start(oracle, pi0)
    trace = Trace("descent")
    clock = _Clock(record_times)
    try:
        ev = oracle.evaluate(pi)
        best = ev.value
        trace.rows.append(TraceRow(0, ev.value, best, ev.raw_lr_value, eta0, "n/a", clock()))
        eta, stall = eta0, 0
        for t in range(1, max_iter + 1):
            step_eta = eta
            pi = oracle.project(pi - eta * ev.subgradient)
            ev = oracle.evaluate(pi)
            if ev.value < best:
                best, stall = ev.value, 0
            else:
                stall += 1
                if stall > 2:
                    eta, stall = eta / 2.0, 0
            trace.rows.append(TraceRow(t, ev.value, best, ev.raw_lr_value, step_eta, "n/a", clock()))
    except ContractError:
        raise
    except Exception as exc:
        trace.termination = "error"
        raise SolverError(trace, exc) from exc
    return trace


def run_adam(oracle: OracleHandle, pi0, eta0: float, max_iter: int, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8, record_times: bool = True) -> Trace:
    if not eta0 > 0:
        raise ContractError("eta0 must be positive")
    pi = _check_start(oracle, pi0)
    trace = Trace("adam")
    clock = _Clock(record_times)
    try:
        ev = oracle.evaluate(pi)
        best = ev.value
        trace.rows.append(TraceRow(0, ev.value, best, ev.raw_lr_value, eta0, "n/a", clock()))
        m1 = np.zeros_like(pi)
        m2 = np.zeros_like(pi)
        for t in range(1, max_iter + 1):
            g = ev.subgradient
            m1 = beta1 * m1 + (1 - beta1) * g
            m2 = beta2 * m2 + (1 - beta2) * g * g
            mhat = m1 / (1 - beta1 ** t)
            vhat = m2 / (1 - beta2 ** t)
            pi = oracle.project(pi - eta0 * mhat / (np.sqrt(vhat) + eps))
            ev = oracle.evaluate(pi)
            best = min(best, ev.value)
            trace.rows.append(TraceRow(t, ev.value, best, ev.raw_lr_value, eta0, "n/a", clock()))
    except ContractError:
        raise
    except Exception as exc:
        trace.termination = "error"
        raise SolverError(trace, exc) from exc
    return trace
