"""Hybrid epidemic region: one submodel that switches its own resolution.

A region starts as an agent population, trades itself for an aggregate
representation when the infected fraction crosses the up-threshold, and
comes back down when the epidemic recedes, using whichever
aggregation realization its switch policy names.  Regions are coupled
only through the global infected fraction the controller publishes on the
shared store at checkpoint barriers, so they can run on independent
execution units inside a window.
"""

from __future__ import annotations

import numpy as np

from .exchange import SharedStore, apportion
from .kernel import (
    EVENT_CHANNEL,
    Message,
    ObservationRecord,
    Snapshot,
    Submodel,
    make_snapshot,
    snapshot_state,
)
from .models import DEFAULT_REGISTRY, SirParams, abm_sir_step, rk4_step, sir_field
from .multiscale import (
    COHABITATION,
    MACRO,
    MICRO,
    PUPPETEER,
    VIEW,
    ZOOM,
    MacroState,
    SwitchDecision,
    SwitchPolicy,
    aggregate,
    cohabit_step,
    disaggregate,
    evaluate_switch,
    select_random_positions,
    view_refresh,
)
from .orchestration import CONTROLLER_ID
from .population import MicroPopulation
from .rng import CounterRng

COHAB = "cohab"

GLOBAL_NAMESPACE = "run"
GLOBAL_I_FRAC_KEY = "global_i_frac"


class EpidemicRegion(Submodel):
    """SIR region with adaptive resolution.

    ``policy=None`` pins the region to its initial mode.  ``mixing``
    blends the local infected fraction with the store-published global one
    (frozen within each checkpoint window); cohabitation regions keep a
    ``macro_share`` of their population as aggregate mass while in the
    high-infection mode.
    """

    def __init__(
        self,
        submodel_id: str,
        params: SirParams,
        i0: int,
        quantum,
        policy: SwitchPolicy | None = None,
        step_ticks: int = 1,
        initial_mode: str = MICRO,
        mixing: float = 0.0,
        macro_share: float = 0.5,
        behavior: str = "default",
        store: SharedStore | None = None,
        registry=DEFAULT_REGISTRY,
    ):
        super().__init__(submodel_id, step_ticks)
        if not 0 <= i0 <= params.n_total:
            raise ValueError("i0 must lie in [0, n_total]")
        if not 0.0 <= mixing < 1.0:
            raise ValueError("mixing must lie in [0, 1)")
        if initial_mode not in (MICRO, MACRO):
            raise ValueError(f"initial mode must be micro or macro, got {initial_mode!r}")
        self.params = params
        self.i0 = i0
        self.policy = policy
        self.initial_mode = initial_mode
        self.mixing = mixing
        self.macro_share = macro_share
        self.behavior = behavior
        self.store = store
        self.registry = registry
        self.h_per_step = float(step_ticks * quantum)

        self.mode = initial_mode
        self.pop: MicroPopulation | None = None
        self.macro: MacroState | None = None
        self.rng = CounterRng(0)
        self.ticks_in_mode = 0
        self.switch_count = 0
        self._mint = 0
        self._tick = 0

    # -- lifecycle ---------------------------------------------------------

    def initialize(self, seed: int) -> None:
        self.rng = CounterRng.for_stream(seed, f"region:{self.id}")
        n = self.params.n_total
        self.pop = MicroPopulation.build(
            self.id, [n - self.i0, self.i0, 0], behavior=self.behavior
        )
        self._mint = self.pop.next_id
        self.macro = None
        self.mode = MICRO
        self.ticks_in_mode = 0
        self.switch_count = 0
        self._tick = 0
        if self.initial_mode == MACRO:
            strategy = self.policy.strategy if self.policy else ZOOM
            self._switch_up(strategy)
            self.switch_count = 0  # the initial representation is not a switch

    # -- representation switching -------------------------------------------

    def _switch_up(self, strategy: str) -> None:
        if strategy == COHABITATION:
            n_macro = int(round(self.macro_share * len(self.pop)))
            macro_counts = apportion(self.pop.counts(), n_macro)
            mask = np.zeros(len(self.pop), dtype=bool)
            for k, need in enumerate(macro_counts):
                members = np.flatnonzero(self.pop.compartments == k)
                mask[select_random_positions(members, need, self.rng)] = True
            extracted = self.pop.extract(mask)
            self.macro, _ = aggregate(extracted, ZOOM)
            self._mint = max(self._mint, self.pop.next_id)
            self.mode = COHAB
        else:
            self.macro, retained = aggregate(self.pop, strategy)
            self.pop = retained  # None for zoom, frozen/bound otherwise
            if self.pop is not None:
                self._mint = max(self._mint, self.pop.next_id)
            self.mode = MACRO
        self.ticks_in_mode = 0

    def _switch_down(self, strategy: str) -> None:
        if strategy == COHABITATION:
            minted = disaggregate(
                self.macro, COHABITATION, None, self.rng,
                region_id=self.id, id_start=self._mint,
            )
            self._mint = minted.next_id
            self.pop.merge(minted)
        else:
            self.pop = disaggregate(
                self.macro, strategy, self.pop, self.rng,
                region_id=self.id, id_start=self._mint,
            )
            self._mint = max(self._mint, self.pop.next_id)
        self.macro = None
        self.mode = MICRO
        self.ticks_in_mode = 0

    # -- stepping ------------------------------------------------------------

    def _effective_mixing(self) -> tuple[float, float]:
        """(mixing weight, global infected fraction); weight 0 when nothing
        has been published yet."""
        if self.store is None or self.mixing == 0.0:
            return 0.0, 0.0
        global_frac = self.store.get_or(GLOBAL_NAMESPACE, GLOBAL_I_FRAC_KEY, None)
        if global_frac is None:
            return 0.0, 0.0
        return self.mixing, float(global_frac)

    def _counts(self) -> list[int]:
        """Combined per-label counts of whatever representations are live."""
        if self.mode == MICRO:
            return self.pop.counts()
        if self.mode == COHAB:
            micro = self.pop.counts()
            return [m + c for m, c in zip(micro, self.macro.tally.counts)]
        return list(self.macro.tally.counts)

    def infected_fraction(self) -> float:
        return self._counts()[1] / self.params.n_total

    def step(self, from_tick, step_ticks, inbox):
        h = self.h_per_step
        mixing, global_frac = self._effective_mixing()

        if self.mode == MICRO:
            local = self.pop.infected_count() / self.params.n_total
            i_fraction = (1.0 - mixing) * local + mixing * global_frac
            abm_sir_step(
                self.pop, self.params, h, self.rng,
                i_fraction=i_fraction, registry=self.registry,
            )
        elif self.mode == COHAB:
            self.macro, self.pop = cohabit_step(
                self.macro, self.pop, self.params, h, self.rng, registry=self.registry
            )
        else:
            field = sir_field(self.params, mixing, global_frac)
            view = np.array(self.macro.continuous_view)
            new_view = rk4_step(field, view, h)
            self.macro = MacroState(self.macro.tally.absorb((new_view - view).tolist()))
            if self.policy is not None and self.policy.strategy == VIEW:
                view_refresh(self.pop, self.macro, self.rng)

        outbox: list[Message] = []
        if self.policy is not None:
            policy_mode = MICRO if self.mode == MICRO else MACRO
            decision = evaluate_switch(
                self.policy, self.infected_fraction(), policy_mode, self.ticks_in_mode
            )
            if decision is SwitchDecision.STAY:
                self.ticks_in_mode += step_ticks
            else:
                old_mode = self.mode
                if decision is SwitchDecision.SWITCH_TO_MACRO:
                    self._switch_up(self.policy.strategy)
                else:
                    self._switch_down(self.policy.strategy)
                self.switch_count += 1
                outbox.append(Message(self.id, EVENT_CHANNEL, {
                    "event": "switch",
                    "tick": from_tick + step_ticks,
                    "from": old_mode,
                    "to": self.mode,
                }))
        else:
            self.ticks_in_mode += step_ticks

        self._tick = from_tick + step_ticks
        return outbox

    # -- observation & snapshots ----------------------------------------------

    def observe(self) -> ObservationRecord:
        s, i, r = self._counts()
        return ObservationRecord(
            self._tick, self.id, (("S", s), ("I", i), ("R", r)), mode_tag=self.mode
        )

    def snapshot(self) -> Snapshot:
        state = {
            "tick": self._tick,
            "mode": self.mode,
            "ticks_in_mode": self.ticks_in_mode,
            "switch_count": self.switch_count,
            "mint": self._mint,
            "rng": self.rng.state(),
            "pop": self.pop.state() if self.pop is not None else None,
            "macro": self.macro.state() if self.macro is not None else None,
        }
        return make_snapshot(self.id, self._tick, state)

    def restore(self, snapshot: Snapshot) -> None:
        state = snapshot_state(snapshot)
        self._tick = state["tick"]
        self.mode = state["mode"]
        self.ticks_in_mode = state["ticks_in_mode"]
        self.switch_count = state["switch_count"]
        self._mint = state["mint"]
        self.rng = CounterRng.from_state(state["rng"])
        self.pop = MicroPopulation.from_state(state["pop"]) if state["pop"] else None
        self.macro = MacroState.from_state(state["macro"]) if state["macro"] else None


# --- controller hooks for epidemic scenarios -----------------------------------

def publish_global_infection(controller, tick, observations) -> None:
    """Barrier hook: publish the run-wide infected fraction on the store.

    Regions read it during the next window, so cross-region coupling only
    moves at checkpoints (the conservative contract).
    """
    total = 0
    infected = 0
    for record in observations:
        if "I" not in record.labels:
            continue
        infected += record.value("I")
        total += record.value("S") + record.value("I") + record.value("R")
    fraction = infected / total if total else 0.0
    controller.store.put(
        GLOBAL_NAMESPACE, GLOBAL_I_FRAC_KEY, fraction, writer=CONTROLLER_ID, tick=tick
    )


def conservation_check(expected_total: int):
    """Consistency check: combined S+I+R across regions equals the initial
    total, exactly."""

    def check(controller, tick, observations) -> bool:
        total = 0
        for record in observations:
            if "I" not in record.labels:
                continue
            total += record.value("S") + record.value("I") + record.value("R")
        return total == expected_total

    return check
