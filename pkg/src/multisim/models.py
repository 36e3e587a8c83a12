"""Reference dynamics: a continuous SIR model, a stochastic agent-based SIR
model with pluggable behaviors, and an exactly solvable decay model.

The SIR equations are the standard frequency-dependent form

    s' = -beta * s * i/N,   i' = beta * s * i/N - gamma * i,   r' = gamma * i

discretized for agents with exponential hazards p = 1 - exp(-rate * h).
Agent behaviors separate *what* an agent is from *how* it reacts to a
hazard, so reactions can be swapped at run time without touching agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonFiniteDerivative, UnknownBehavior
from .kernel import ObservationRecord, Snapshot, Submodel, make_snapshot, snapshot_state
from .population import SIR_LABELS, MicroPopulation


# --- fixed-step integrator -------------------------------------------------

def rk4_step(field: Callable[[np.ndarray], np.ndarray], state: np.ndarray, h: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta update."""
    if h <= 0:
        raise ValueError("step size must be positive")
    y = np.asarray(state, dtype=np.float64)
    k1 = np.asarray(field(y), dtype=np.float64)
    k2 = np.asarray(field(y + 0.5 * h * k1), dtype=np.float64)
    k3 = np.asarray(field(y + 0.5 * h * k2), dtype=np.float64)
    k4 = np.asarray(field(y + h * k3), dtype=np.float64)
    if not (
        np.isfinite(k1).all()
        and np.isfinite(k2).all()
        and np.isfinite(k3).all()
        and np.isfinite(k4).all()
    ):
        raise NonFiniteDerivative(f"field not finite near state {y}")
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# --- equation-based SIR ------------------------------------------------------

@dataclass(frozen=True)
class SirParams:
    """Transmission/recovery rates per unit time and the closed-system size."""

    beta: float
    gamma: float
    n_total: int

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma}")
        if self.n_total <= 0:
            raise ValueError("n_total must be positive")


@dataclass(frozen=True)
class EbmState:
    s: float
    i: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.i, self.r], dtype=np.float64)

    @classmethod
    def from_array(cls, y: np.ndarray) -> "EbmState":
        return cls(float(y[0]), float(y[1]), float(y[2]))

    @property
    def total(self) -> float:
        return self.s + self.i + self.r


def sir_field(
    params: SirParams, mixing: float = 0.0, external_fraction: float = 0.0
) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field for (s, i, r); the effective infected fraction blends
    the local fraction with an external one held constant over the step."""
    beta, gamma, n = params.beta, params.gamma, params.n_total

    def field(y: np.ndarray) -> np.ndarray:
        s, i, _ = y
        i_frac = (1.0 - mixing) * (i / n) + mixing * external_fraction
        flow_si = beta * s * i_frac
        flow_ir = gamma * i
        return np.array([-flow_si, flow_si - flow_ir, flow_ir])

    return field


def ebm_sir_step(
    state: EbmState,
    params: SirParams,
    h: float,
    mixing: float = 0.0,
    external_fraction: float = 0.0,
) -> EbmState:
    y = rk4_step(sir_field(params, mixing, external_fraction), state.as_array(), h)
    return EbmState.from_array(y)


# --- hazards ----------------------------------------------------------------

def infection_probability(beta: float, i_fraction: float, h: float) -> float:
    """Per-step infection probability under an exponential hazard."""
    return -math.expm1(-beta * i_fraction * h)


def recovery_probability(gamma: float, h: float) -> float:
    return -math.expm1(-gamma * h)


# --- agent behaviors (abstraction separated from implementation) -------------

SUSCEPTIBLE, INFECTED, RECOVERED = 0, 1, 2


class BehaviorPolicy:
    """How an agent reacts to a hazard; a pure function of (agent state,
    hazard, rng draw)."""

    def __init__(self, behavior_id: str):
        self.behavior_id = behavior_id

    def infection_hazard(self, hazard: float) -> float:
        """Effective infection probability given the baseline one."""
        return hazard

    def react(self, compartment: int, hazard: float, draw: float) -> int:
        """Next compartment for one agent given its per-step hazard."""
        if compartment == SUSCEPTIBLE and draw < self.infection_hazard(hazard):
            return INFECTED
        if compartment == INFECTED and draw < hazard:
            return RECOVERED
        return compartment


class ScaledHazardBehavior(BehaviorPolicy):
    """Scales the infection hazard by a fixed factor (recovery untouched)."""

    def __init__(self, behavior_id: str, infection_scale: float):
        super().__init__(behavior_id)
        self.infection_scale = infection_scale

    def infection_hazard(self, hazard: float) -> float:
        return hazard * self.infection_scale


class BehaviorRegistry:
    """Registry the agents reference behaviors through (the Bridge between
    agent identity and reaction code)."""

    def __init__(self):
        self._behaviors: dict[str, BehaviorPolicy] = {}

    def register(self, policy: BehaviorPolicy) -> None:
        self._behaviors[policy.behavior_id] = policy

    def has(self, behavior_id: str) -> bool:
        return behavior_id in self._behaviors

    def get(self, behavior_id: str) -> BehaviorPolicy:
        try:
            return self._behaviors[behavior_id]
        except KeyError:
            raise UnknownBehavior(f"behavior {behavior_id!r} is not registered") from None


def default_registry() -> BehaviorRegistry:
    registry = BehaviorRegistry()
    registry.register(BehaviorPolicy("default"))
    registry.register(ScaledHazardBehavior("cautious", 0.5))
    return registry

DEFAULT_REGISTRY = default_registry()


# --- agent-based SIR step -----------------------------------------------------

def abm_sir_step(
    pop: MicroPopulation,
    params: SirParams,
    h: float,
    rng,
    i_fraction: float | None = None,
    registry: BehaviorRegistry = DEFAULT_REGISTRY,
) -> MicroPopulation:
    """Advance every active agent by one step of h model seconds, in place.

    Draw discipline is fixed: one draw per active susceptible, then one per
    active infected, each group scanned in agent-id order.  Frozen agents
    neither draw nor transition.
    """
    s_idx = pop.label_index("S")
    i_idx = pop.label_index("I")
    r_idx = pop.label_index("R")
    active = ~pop.frozen
    sus = np.flatnonzero(active & (pop.compartments == s_idx))
    inf = np.flatnonzero(active & (pop.compartments == i_idx))
    if i_fraction is None:
        i_fraction = len(inf) / params.n_total
    p_inf = infection_probability(params.beta, i_fraction, h)
    p_rec = recovery_probability(params.gamma, h)

    draws = rng.random_block(len(sus) + len(inf))

    # Per-agent effective infection hazard through each agent's behavior.
    hazard = np.full(len(sus), p_inf)
    codes = pop.behavior_codes[sus]
    for code in np.unique(codes):
        policy = registry.get(pop.behavior_table[code])
        hazard[codes == code] = policy.infection_hazard(p_inf)

    infected_now = sus[draws[: len(sus)] < hazard]
    recovered_now = inf[draws[len(sus):] < p_rec]
    pop.compartments[infected_now] = i_idx
    pop.compartments[recovered_now] = r_idx
    return pop


# --- decay model (solver oracle) ---------------------------------------------

@dataclass(frozen=True)
class DecayState:
    y: float
    rate: float


def decay_step(state: DecayState, h: float) -> DecayState:
    """RK4 update of y' = -rate * y."""
    y = rk4_step(lambda v: -state.rate * v, np.array([state.y]), h)
    return DecayState(float(y[0]), state.rate)


class DecaySubmodel(Submodel):
    """Leaf submodel wrapping the decay oracle; observable value 'y'."""

    def __init__(self, submodel_id: str, quantum, y0: float, rate: float, step_ticks: int = 1):
        super().__init__(submodel_id, step_ticks)
        self.quantum = quantum
        self.y0 = y0
        self.rate = rate
        self.state = DecayState(y0, rate)
        self._tick = 0

    def initialize(self, seed: int) -> None:
        self.state = DecayState(self.y0, self.rate)
        self._tick = 0

    def step(self, from_tick, step_ticks, inbox):
        h = float(step_ticks * self.quantum)
        self.state = decay_step(self.state, h)
        self._tick = from_tick + step_ticks
        return []

    def observe(self) -> ObservationRecord:
        return ObservationRecord(self._tick, self.id, (("y", self.state.y),), "ode")

    def snapshot(self) -> Snapshot:
        return make_snapshot(self.id, self._tick, {"y": self.state.y, "tick": self._tick})

    def restore(self, snapshot: Snapshot) -> None:
        state = snapshot_state(snapshot)
        self.state = DecayState(state["y"], self.rate)
        self._tick = state["tick"]
