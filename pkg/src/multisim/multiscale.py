"""Switching between micro (agent) and macro (aggregate) representations.

Four aggregation realizations are supported:

* ``zoom``         -- agents are destroyed; their identities are lost.
* ``puppeteer``    -- agents are frozen and later reconciled to the macro
                      tally by changing as few of them as possible.
* ``view``         -- agents stay alive but their compartments are
                      overwritten to mirror the macro state.
* ``cohabitation`` -- macro mass and agents coexist and step under a force
                      of infection computed from their combined infected
                      mass.

Conservation is exact across every realization: tallies carry integer
counts, and all continuous drift is routed through ConservedTally.absorb.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AlreadyAggregated,
    CountMismatch,
    RetainedMissing,
    UnsupportedQuery,
)
from .exchange import ConservedTally, apportion
from .models import DEFAULT_REGISTRY, SirParams, abm_sir_step, rk4_step, sir_field
from .population import ACTIVE, BOUND, DISSOLVED, FROZEN, Agent, MicroPopulation

ZOOM = "zoom"
PUPPETEER = "puppeteer"
VIEW = "view"
COHABITATION = "cohabitation"
STRATEGIES = (ZOOM, PUPPETEER, VIEW, COHABITATION)


class MacroState:
    """Aggregate representation of a region: a conserved tally plus the
    continuous values it tracks."""

    def __init__(self, tally: ConservedTally):
        self.tally = tally

    @property
    def continuous_view(self) -> list[float]:
        return self.tally.continuous_view

    @property
    def total(self) -> int:
        return self.tally.total

    @property
    def labels(self) -> tuple[str, ...]:
        return self.tally.labels

    def copy(self) -> "MacroState":
        return MacroState(self.tally.copy())

    def state(self) -> dict:
        return {
            "labels": self.tally.labels,
            "counts": list(self.tally.counts),
            "residuals": list(self.tally.residuals),
            "total": self.tally.total,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MacroState":
        return cls(
            ConservedTally(state["labels"], state["counts"], state["residuals"], state["total"])
        )

    def __repr__(self):
        return f"MacroState({self.tally!r})"


def aggregate(
    pop: MicroPopulation, strategy: str
) -> tuple[MacroState, MicroPopulation | None]:
    """Collapse a population into a macro state.

    The macro tally counts equal the per-label agent counts exactly, with
    zero residuals.  What happens to the agents depends on the strategy:
    zoom destroys them, puppeteer freezes and retains them, view and
    cohabitation retain them active with the macro bound as their emitter.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if pop.status != ACTIVE:
        raise AlreadyAggregated(
            f"population {pop.region_id!r} is {pop.status}, not active"
        )
    macro = MacroState(ConservedTally(pop.labels, pop.counts()))
    if strategy == ZOOM:
        pop.status = DISSOLVED
        return macro, None
    if strategy == PUPPETEER:
        pop.status = FROZEN
        pop.set_all_frozen(True)
        return macro, pop
    pop.status = BOUND
    return macro, pop


def select_random_positions(members: np.ndarray, count: int, rng) -> np.ndarray:
    """``count`` distinct positions drawn uniformly from ``members``:
    one draw per member, keep the smallest keys (ties by position)."""
    keys = rng.random_block(len(members))
    return np.sort(members[np.lexsort((members, keys))[:count]])


def reconcile_compartments(
    pop: MicroPopulation, target_counts: Sequence[int], rng
) -> int:
    """Move the minimum number of agents between compartments so per-label
    counts match ``target_counts``; moved agents are picked uniformly at
    random among each surplus label's agents.  Returns how many changed."""
    current = pop.counts()
    if sum(current) != sum(target_counts):
        raise CountMismatch(
            f"population size {sum(current)} != target total {sum(target_counts)}"
        )
    surplus = [c - t for c, t in zip(current, target_counts)]
    movers: list[np.ndarray] = []
    for k, extra in enumerate(surplus):
        if extra <= 0:
            continue
        members = np.flatnonzero(pop.compartments == k)
        movers.append(select_random_positions(members, extra, rng))
    pool = np.concatenate(movers) if movers else np.zeros(0, dtype=np.int64)
    cursor = 0
    for k, extra in enumerate(surplus):
        if extra >= 0:
            continue
        need = -extra
        pop.compartments[pool[cursor:cursor + need]] = k
        cursor += need
    return len(pool)


def disaggregate(
    macro: MacroState,
    strategy: str,
    retained: MicroPopulation | None,
    rng,
    region_id: str = "region",
    id_start: int = 0,
) -> MicroPopulation:
    """Expand a macro state back into agents.

    Zoom mints fresh agents with compartments apportioned over the
    continuous view; puppeteer unfreezes the retained agents and reconciles
    them to the tally with minimal changes; view (and cohabitation with a
    bound twin) overwrites retained agents' compartments to reflect the
    macro state.  Resulting per-label counts always equal the tally counts.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == ZOOM or (strategy == COHABITATION and retained is None):
        counts = apportion(macro.continuous_view, macro.total)
        if counts != list(macro.tally.counts):
            raise CountMismatch(
                f"apportioned counts {counts} != tally counts {macro.tally.counts}"
            )
        return MicroPopulation.build(
            region_id, counts, labels=macro.labels, id_start=id_start
        )
    if retained is None:
        raise RetainedMissing(f"strategy {strategy!r} needs the retained population")
    if strategy == PUPPETEER and retained.status != FROZEN:
        raise RetainedMissing(
            f"puppeteer expects a frozen population, got {retained.status!r}"
        )
    reconcile_compartments(retained, macro.tally.counts, rng)
    retained.set_all_frozen(False)
    retained.status = ACTIVE
    if retained.counts() != list(macro.tally.counts):
        raise CountMismatch("reconciled counts diverge from tally")
    return retained


def view_refresh(pop: MicroPopulation, macro: MacroState, rng) -> None:
    """Recompute bound agents' compartments to reflect the macro state."""
    reconcile_compartments(pop, macro.tally.counts, rng)


def cohabit_step(
    macro: MacroState,
    pop: MicroPopulation,
    params: SirParams,
    h: float,
    rng,
    registry=None,
) -> tuple[MacroState, MicroPopulation]:
    """One bidirectional step of coexisting macro mass and agents.

    Both sides feel the force of infection from the combined infected mass
    at the start of the step; afterwards the macro tally absorbs its
    continuous drift so the combined label totals stay exactly conserved.
    """
    registry = registry or DEFAULT_REGISTRY
    combined_total = macro.total + len(pop)
    if combined_total == 0:
        return macro, pop
    i_label = "I"
    combined_infected = macro.tally.count(i_label) + pop.infected_count(i_label)
    combined_fraction = combined_infected / combined_total

    if len(pop):
        shared = SirParams(params.beta, params.gamma, combined_total)
        abm_sir_step(pop, shared, h, rng, i_fraction=combined_fraction, registry=registry)

    if macro.total:
        field = sir_field(
            SirParams(params.beta, params.gamma, combined_total),
            mixing=1.0,
            external_fraction=combined_fraction,
        )
        view = np.array(macro.continuous_view)
        new_view = rk4_step(field, view, h)
        macro = MacroState(macro.tally.absorb((new_view - view).tolist()))
    return macro, pop


# --- adaptive resolution -----------------------------------------------------

class SwitchDecision(enum.Enum):
    STAY = "stay"
    SWITCH_TO_MACRO = "switch_to_macro"
    SWITCH_TO_MICRO = "switch_to_micro"


@dataclass(frozen=True)
class SwitchPolicy:
    """Hysteresis thresholds on the infected fraction plus a dwell time.

    ``dwell_ticks`` counts completed ticks in the current mode; a region
    that just switched has 0, so dwell_ticks >= 1 rules out immediate
    reversal.  dwell_ticks = 0 reproduces the plain threshold rule.
    """

    theta_up: float
    theta_down: float
    dwell_ticks: int = 0
    strategy: str = ZOOM

    def __post_init__(self):
        if not (0.0 < self.theta_up < 1.0 and 0.0 < self.theta_down < 1.0):
            raise ValueError("thresholds must lie in (0, 1)")
        if not self.theta_down < self.theta_up:
            raise ValueError(
                f"hysteresis requires theta_down < theta_up "
                f"({self.theta_down} >= {self.theta_up})"
            )
        if self.dwell_ticks < 0:
            raise ValueError("dwell_ticks must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


MICRO = "micro"
MACRO = "macro"


def evaluate_switch(
    policy: SwitchPolicy,
    observed_infected_fraction: float,
    current_mode: str,
    ticks_in_mode: int,
) -> SwitchDecision:
    """Resolution-change trigger: leave micro when the infected fraction
    reaches theta_up, return when it falls to theta_down, and never switch
    before dwell_ticks completed ticks in the current mode."""
    if ticks_in_mode < 0:
        raise ValueError("ticks_in_mode must be non-negative")
    if ticks_in_mode < policy.dwell_ticks:
        return SwitchDecision.STAY
    if current_mode == MICRO and observed_infected_fraction >= policy.theta_up:
        return SwitchDecision.SWITCH_TO_MACRO
    if current_mode == MACRO and observed_infected_fraction <= policy.theta_down:
        return SwitchDecision.SWITCH_TO_MICRO
    return SwitchDecision.STAY


# --- macro zone behind a micro-zone interface ---------------------------------

_COUNT_QUERY = re.compile(r"^count\((\w+)\)$")
_AGENT_QUERY = re.compile(r"^agent_\w+\(")


class MacroAsMicroAdapter:
    """Presents a macro zone through the micro-zone query interface.

    Count and total queries read through to the tally; step requests are
    forwarded to the macro stepper.  Agent-identity queries cannot be
    answered by an aggregate and raise UnsupportedQuery.
    """

    def __init__(self, inner: MacroState, stepper: Callable[[], None] | None = None):
        self.inner = inner
        self._stepper = stepper

    def query(self, micro_query: str):
        match = _COUNT_QUERY.match(micro_query)
        if match:
            label = match.group(1)
            if label not in self.inner.labels:
                raise UnsupportedQuery(f"unknown label {label!r}")
            return self.inner.tally.count(label)
        if micro_query == "total":
            return self.inner.total
        if micro_query == "step":
            if self._stepper is None:
                raise UnsupportedQuery("adapter has no stepper bound")
            return self._stepper()
        if _AGENT_QUERY.match(micro_query):
            raise UnsupportedQuery(
                f"{micro_query!r}: aggregate zones cannot answer agent-identity queries"
            )
        raise UnsupportedQuery(f"unknown micro query {micro_query!r}")


__all__ = [
    "Agent",
    "MicroPopulation",
    "MacroState",
    "MacroAsMicroAdapter",
    "SwitchDecision",
    "SwitchPolicy",
    "aggregate",
    "cohabit_step",
    "disaggregate",
    "evaluate_switch",
    "reconcile_compartments",
    "select_random_positions",
    "view_refresh",
    "ZOOM",
    "PUPPETEER",
    "VIEW",
    "COHABITATION",
    "STRATEGIES",
    "MICRO",
    "MACRO",
]
