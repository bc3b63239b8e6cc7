"""Three-level heuristics for the proximal parameter eta.

Long-term gates decide whether an increase or decrease is permitted at all,
middle-term counters require a run of equal outcomes at the same eta, and the
short-term rule applies the multiplicative change and clamps it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .oracles import ContractError

KINDS = ("constant", "soft", "hard", "balancing")
SERIOUS, NULL = "serious", "null"


@dataclass
class EtaConfig:
    kind: str = "constant"
    eta0: float = 1.0
    eta_incr: float = 1.1
    eta_decr: float = 0.9
    eta_max: float = 1e6
    eta_min: float = 1e-6
    m_tilde: float = 0.01
    eta_star: float = 1e4
    min_consec_ss: int = 2
    min_consec_ns: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown eta strategy {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.eta_min <= self.eta0 <= self.eta_max:
            raise ContractError("need 0 < eta_min <= eta0 <= eta_max")
        if not self.eta_incr > 1 or not 0 < self.eta_decr < 1:
            raise ContractError("need eta_incr > 1 and 0 < eta_decr < 1")
        if not 0 <= self.m_tilde < 1:
            raise ContractError("m_tilde must lie in [0, 1)")


@dataclass
class EtaState:
    eta: float
    consec_ss: int = 0
    consec_ns: int = 0

    @classmethod
    def initial(cls, config: EtaConfig) -> "EtaState":
        return cls(config.eta0)


class Gates(NamedTuple):
    allow_increase: bool
    allow_decrease: bool
    force_increase: bool = False  # hard strategy: increase even after a null step


def long_term_gate(kind: str, v_star: float, eps_star: float, quad: float, lin: float,
                   m_tilde: float, outcome: str) -> Gates:
    if kind == "constant":
        return Gates(False, False)
    small_step = v_star < m_tilde * eps_star
    if kind == "soft":
        return Gates(True, not (outcome == NULL and small_step))
    if kind == "hard":
        return Gates(True, True, force_increase=small_step)
    if kind == "balancing":
        inc = not (outcome == SERIOUS and quad <= m_tilde * lin)
        dec = not (m_tilde * quad >= lin)
        return Gates(inc, dec)
    raise ContractError(f"unknown eta strategy {kind!r}")


def update_eta(state: EtaState, config: EtaConfig, outcome: str, gates: Gates) -> EtaState:
    """Serious steps push eta up, null steps push it down, subject to the gates and counters."""
    if config.kind == "constant":
        return state
    if outcome == SERIOUS:
        ss, ns = state.consec_ss + 1, 0
    elif outcome == NULL:
        ss, ns = 0, state.consec_ns + 1
    else:
        raise ContractError(f"unknown step outcome {outcome!r}")

    eta = state.eta
    if gates.force_increase:
        new = eta * config.eta_incr
    elif outcome == SERIOUS and gates.allow_increase and ss >= config.min_consec_ss:
        new = eta * config.eta_incr
    elif outcome == NULL and gates.allow_decrease and ns >= config.min_consec_ns:
        new = eta * config.eta_decr
    else:
        return EtaState(eta, ss, ns)
    new = min(max(new, config.eta_min), config.eta_max)
    if new != eta:
        ss = ns = 0
    return EtaState(new, ss, ns)
