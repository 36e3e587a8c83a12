"""Agent populations stored as parallel arrays, ordered by agent id.

The array representation keeps stepping and reconciliation vectorized for
populations in the 10^4 range; ``Agent`` objects are materialized views
for inspection, never the working storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnknownBehavior

SIR_LABELS = ("S", "I", "R")

# Population lifecycle: active populations step; frozen ones are retained
# under macro control (Puppeteer); bound ones mirror a macro state (View /
# Cohabitation); dissolved ones were destroyed by Zoom aggregation.
ACTIVE = "active"
FROZEN = "frozen"
BOUND = "bound"
DISSOLVED = "dissolved"


@dataclass(frozen=True)
class Agent:
    """Immutable view of one agent's state."""

    agent_id: int
    compartment: str
    frozen: bool
    behavior_ref: str


class MicroPopulation:
    """Ordered collection of agents for one region.

    Agent ids are unique and strictly increasing in storage order; new ids
    are minted from ``next_id``, which only moves forward so destroyed ids
    are never reused.
    """

    def __init__(
        self,
        region_id: str,
        labels: tuple[str, ...] = SIR_LABELS,
        ids: np.ndarray | None = None,
        compartments: np.ndarray | None = None,
        frozen: np.ndarray | None = None,
        behavior_codes: np.ndarray | None = None,
        behavior_table: list[str] | None = None,
        next_id: int = 0,
        status: str = ACTIVE,
    ):
        self.region_id = region_id
        self.labels = tuple(labels)
        n = 0 if ids is None else len(ids)
        self.ids = np.zeros(0, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        self.compartments = (
            np.zeros(n, dtype=np.int8) if compartments is None else np.asarray(compartments, dtype=np.int8)
        )
        self.frozen = np.zeros(n, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
        self.behavior_codes = (
            np.zeros(n, dtype=np.int16) if behavior_codes is None else np.asarray(behavior_codes, dtype=np.int16)
        )
        self.behavior_table = list(behavior_table) if behavior_table else ["default"]
        self.next_id = next_id
        self.status = status

    @classmethod
    def build(
        cls,
        region_id: str,
        counts: list[int],
        labels: tuple[str, ...] = SIR_LABELS,
        behavior: str = "default",
        id_start: int = 0,
    ) -> "MicroPopulation":
        """Population with ``counts[k]`` agents in label k, in label order."""
        total = sum(counts)
        compartments = np.repeat(np.arange(len(labels), dtype=np.int8), counts)
        return cls(
            region_id,
            labels=labels,
            ids=np.arange(id_start, id_start + total, dtype=np.int64),
            compartments=compartments,
            frozen=np.zeros(total, dtype=bool),
            behavior_codes=np.zeros(total, dtype=np.int16),
            behavior_table=[behavior],
            next_id=id_start + total,
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def size(self) -> int:
        return len(self.ids)

    def counts(self) -> list[int]:
        """Per-label agent counts, frozen agents included."""
        return np.bincount(self.compartments, minlength=len(self.labels)).tolist()

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    def infected_count(self, infected_label: str = "I") -> int:
        return int(np.sum(self.compartments == self.label_index(infected_label)))

    @property
    def agents(self) -> list[Agent]:
        return [
            Agent(
                int(self.ids[k]),
                self.labels[self.compartments[k]],
                bool(self.frozen[k]),
                self.behavior_table[self.behavior_codes[k]],
            )
            for k in range(len(self.ids))
        ]

    def agent(self, agent_id: int) -> Agent:
        k = int(np.searchsorted(self.ids, agent_id))
        if k >= len(self.ids) or self.ids[k] != agent_id:
            raise KeyError(f"no agent {agent_id} in region {self.region_id!r}")
        return self.agents_at([k])[0]

    def agents_at(self, positions) -> list[Agent]:
        return [
            Agent(
                int(self.ids[k]),
                self.labels[self.compartments[k]],
                bool(self.frozen[k]),
                self.behavior_table[self.behavior_codes[k]],
            )
            for k in positions
        ]

    def behavior_code(self, behavior_id: str) -> int:
        if behavior_id in self.behavior_table:
            return self.behavior_table.index(behavior_id)
        self.behavior_table.append(behavior_id)
        return len(self.behavior_table) - 1

    def set_behavior(self, agent_id: int, behavior_id: str, registry) -> None:
        """Swap an agent's behavior; identity and compartment untouched."""
        if not registry.has(behavior_id):
            raise UnknownBehavior(f"behavior {behavior_id!r} is not registered")
        k = int(np.searchsorted(self.ids, agent_id))
        if k >= len(self.ids) or self.ids[k] != agent_id:
            raise KeyError(f"no agent {agent_id} in region {self.region_id!r}")
        self.behavior_codes[k] = self.behavior_code(behavior_id)

    def set_all_frozen(self, flag: bool) -> None:
        self.frozen[:] = flag

    def copy(self) -> "MicroPopulation":
        return MicroPopulation(
            self.region_id,
            labels=self.labels,
            ids=self.ids.copy(),
            compartments=self.compartments.copy(),
            frozen=self.frozen.copy(),
            behavior_codes=self.behavior_codes.copy(),
            behavior_table=list(self.behavior_table),
            next_id=self.next_id,
            status=self.status,
        )

    def extract(self, mask: np.ndarray) -> "MicroPopulation":
        """Remove the masked agents from this population and return them as
        a new population (sharing the id-minting counter)."""
        taken = MicroPopulation(
            self.region_id,
            labels=self.labels,
            ids=self.ids[mask].copy(),
            compartments=self.compartments[mask].copy(),
            frozen=self.frozen[mask].copy(),
            behavior_codes=self.behavior_codes[mask].copy(),
            behavior_table=list(self.behavior_table),
            next_id=self.next_id,
            status=self.status,
        )
        keep = ~mask
        self.ids = self.ids[keep]
        self.compartments = self.compartments[keep]
        self.frozen = self.frozen[keep]
        self.behavior_codes = self.behavior_codes[keep]
        return taken

    def merge(self, other: "MicroPopulation") -> None:
        """Insert another population's agents, keeping id order."""
        if other.labels != self.labels:
            raise ValueError("cannot merge populations with different labels")
        remap = np.array(
            [self.behavior_code(b) for b in other.behavior_table], dtype=np.int16
        )
        ids = np.concatenate([self.ids, other.ids])
        order = np.argsort(ids, kind="stable")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("merging would duplicate agent ids")
        self.ids = ids[order]
        self.compartments = np.concatenate([self.compartments, other.compartments])[order]
        self.frozen = np.concatenate([self.frozen, other.frozen])[order]
        self.behavior_codes = np.concatenate(
            [self.behavior_codes, remap[other.behavior_codes]]
        )[order]
        self.next_id = max(self.next_id, other.next_id)

    # Snapshot support: plain dict of primitives and raw array bytes, so the
    # serialized form is byte-deterministic.
    def state(self) -> dict:
        return {
            "region_id": self.region_id,
            "labels": self.labels,
            "ids": self.ids.tobytes(),
            "compartments": self.compartments.tobytes(),
            "frozen": self.frozen.tobytes(),
            "behavior_codes": self.behavior_codes.tobytes(),
            "behavior_table": list(self.behavior_table),
            "next_id": self.next_id,
            "status": self.status,
        }

    @classmethod
    def from_state(cls, state: dict) -> "MicroPopulation":
        return cls(
            state["region_id"],
            labels=tuple(state["labels"]),
            ids=np.frombuffer(state["ids"], dtype=np.int64).copy(),
            compartments=np.frombuffer(state["compartments"], dtype=np.int8).copy(),
            frozen=np.frombuffer(state["frozen"], dtype=bool).copy(),
            behavior_codes=np.frombuffer(state["behavior_codes"], dtype=np.int16).copy(),
            behavior_table=list(state["behavior_table"]),
            next_id=state["next_id"],
            status=state["status"],
        )

    def __repr__(self):
        pairs = ", ".join(f"{l}={c}" for l, c in zip(self.labels, self.counts()))
        return (
            f"<MicroPopulation {self.region_id!r} n={len(self)} {pairs} "
            f"status={self.status}>"
        )
