"""Simulation kernel: integer-tick time, the uniform submodel interface,
snapshotting, and the composite model tree.

Time is counted in integer ticks of a fixed rational quantum, so every
local step size translates exactly into global ticks and checkpoint ticks
are well-defined.  All cross-submodel influence flows through inbox/outbox
messages routed by composites; there is no shared mutable state between
submodels.
"""

from __future__ import annotations

import hashlib
import pickle
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Any, Iterator, Sequence

from .errors import (
    NonCommensurableStep,
    ScheduleMismatch,
    SnapshotSetIncomplete,
    TickMismatch,
)

# Snapshot payloads start with a single format-version byte.
SNAPSHOT_FORMAT_VERSION = 1

# Reserved outbox channel: messages here are run-log events for the
# controller, never routed to siblings.
EVENT_CHANNEL = "__event__"


def payload_digest(payload: bytes) -> int:
    """Stable 64-bit content hash of a snapshot payload (BLAKE2b-64)."""
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def _as_fraction(value) -> Fraction:
    """Exact rational from int/Fraction/str; floats via their decimal repr,
    so 0.3 means 3/10 rather than the nearest binary double."""
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


class SimClock:
    """Global run time in integer ticks of a fixed rational quantum."""

    def __init__(self, quantum_seconds, now_ticks: int = 0):
        quantum = _as_fraction(quantum_seconds)
        if quantum <= 0:
            raise ValueError("quantum_seconds must be positive")
        if now_ticks < 0:
            raise ValueError("now_ticks must be non-negative")
        self.quantum_seconds = quantum
        self.now_ticks = now_ticks

    def advance_to(self, tick: int) -> None:
        if tick < self.now_ticks:
            raise ValueError(
                f"clock may not move backwards ({self.now_ticks} -> {tick}); "
                "use rollback_to"
            )
        self.now_ticks = tick

    def rollback_to(self, tick: int) -> None:
        if tick < 0:
            raise ValueError("cannot roll back before tick 0")
        self.now_ticks = tick

    def seconds_at(self, tick: int) -> Fraction:
        return tick * self.quantum_seconds

    @property
    def now_seconds(self) -> Fraction:
        return self.seconds_at(self.now_ticks)


def ticks_for(local_seconds, clock: SimClock) -> int:
    """Translate a local duration into global ticks, exactly.

    Raises NonCommensurableStep unless the duration is a positive integer
    multiple of the clock quantum.
    """
    seconds = _as_fraction(local_seconds)
    if seconds <= 0:
        raise NonCommensurableStep(f"duration must be positive, got {seconds}")
    ratio = seconds / clock.quantum_seconds
    if ratio.denominator != 1:
        raise NonCommensurableStep(
            f"{seconds} s is not an integer multiple of the "
            f"{clock.quantum_seconds} s quantum"
        )
    return ratio.numerator


@dataclass(frozen=True)
class Message:
    """One unit of cross-submodel exchange, tagged with its producer."""

    src: str
    channel: str
    payload: Any


@dataclass(frozen=True)
class Coupling:
    """Routes producer outbox messages on a channel into a consumer inbox."""

    producer: str
    consumer: str
    channel: str


@dataclass(frozen=True)
class ObservationRecord:
    """One observation of one submodel at one tick."""

    tick: int
    submodel_id: str
    named_values: tuple[tuple[str, Any], ...]
    mode_tag: str = ""

    def __post_init__(self):
        labels = [label for label, _ in self.named_values]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels in observation: {labels}")

    def value(self, label: str):
        for name, value in self.named_values:
            if name == label:
                return value
        raise KeyError(label)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.named_values)


@dataclass(frozen=True)
class Snapshot:
    """Opaque serialized submodel state pinned to a tick."""

    submodel_id: str
    tick: int
    payload: bytes
    digest: int


def make_snapshot(submodel_id: str, tick: int, state: Any) -> Snapshot:
    """Serialize a state object into a versioned, digested snapshot."""
    payload = bytes([SNAPSHOT_FORMAT_VERSION]) + pickle.dumps(state, protocol=4)
    return Snapshot(submodel_id, tick, payload, payload_digest(payload))


def snapshot_state(snapshot: Snapshot) -> Any:
    """Deserialize the state object carried by a snapshot."""
    version = snapshot.payload[0]
    if version != SNAPSHOT_FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot format version {version}")
    return pickle.loads(snapshot.payload[1:])


class Submodel(ABC):
    """Uniform interface every atomic and composite model implements.

    Contract: ``step`` is deterministic given (state, from_tick, inbox,
    internal RNG state); ``restore(snapshot())`` is an identity on
    observable state; RNG state is part of the snapshot payload.
    """

    id: str
    step_ticks: int

    def __init__(self, submodel_id: str, step_ticks: int = 1):
        if step_ticks < 1:
            raise ValueError("step_ticks must be >= 1")
        self.id = submodel_id
        self.step_ticks = step_ticks

    @abstractmethod
    def initialize(self, seed: int) -> None:
        """Reset to the initial state for the given run seed."""

    @abstractmethod
    def step(self, from_tick: int, step_ticks: int, inbox: Sequence[Message]) -> list[Message]:
        """Advance by step_ticks ticks starting at from_tick; return outbox."""

    @abstractmethod
    def snapshot(self) -> Snapshot:
        """Full serialized state of this submodel (deep for composites)."""

    @abstractmethod
    def restore(self, snapshot: Snapshot) -> None:
        """Restore full state from a snapshot produced by ``snapshot``."""

    @abstractmethod
    def observe(self) -> ObservationRecord:
        """Current observable state as a labeled record."""

    # Per-node snapshotting used by snapshot_tree/restore_tree.  Atomic
    # submodels have no children, so their local state is their full state.
    def local_snapshot(self) -> Snapshot:
        return self.snapshot()

    def local_restore(self, snapshot: Snapshot) -> None:
        self.restore(snapshot)

    def children(self) -> Sequence["Submodel"]:
        return ()

    def __repr__(self):
        return f"<{type(self).__name__} id={self.id!r} step_ticks={self.step_ticks}>"


def walk(node: Submodel) -> Iterator[Submodel]:
    """Preorder traversal of a model tree."""
    yield node
    for child in node.children():
        yield from walk(child)


def leaves(node: Submodel) -> Iterator[Submodel]:
    for sub in walk(node):
        if not sub.children():
            yield sub


def validate_tree(root: Submodel) -> None:
    """Reject duplicate ids (which also forbids shared subtrees) and any
    child step that does not divide its parent's step."""
    seen: set[str] = set()
    for node in walk(root):
        if node.id in seen:
            raise ScheduleMismatch(f"duplicate submodel id {node.id!r} in tree")
        seen.add(node.id)
        for child in node.children():
            if node.step_ticks % child.step_ticks != 0:
                raise ScheduleMismatch(
                    f"child {child.id!r} step {child.step_ticks} does not divide "
                    f"composite {node.id!r} step {node.step_ticks}"
                )


class Composite(Submodel):
    """Internal tree node: delegates stepping to children in declaration
    order and routes messages between them.

    Within one composite step, children due at a boundary are all stepped
    before routing, so a message emitted at substep k reaches its consumer
    at the consumer's next substep, never the same one.  Undelivered
    messages wait in per-child pending buffers, which are part of this
    node's snapshot state.
    """

    def __init__(
        self,
        submodel_id: str,
        children: Sequence[Submodel],
        couplings: Sequence[Coupling] = (),
        step_ticks: int | None = None,
    ):
        self._children = list(children)
        if step_ticks is None:
            step_ticks = lcm(*(c.step_ticks for c in self._children)) if self._children else 1
        super().__init__(submodel_id, step_ticks)
        child_ids = {c.id for c in self._children}
        for child in self._children:
            if self.step_ticks % child.step_ticks != 0:
                raise ScheduleMismatch(
                    f"child {child.id!r} step {child.step_ticks} does not divide "
                    f"composite step {self.step_ticks}"
                )
        for coupling in couplings:
            if coupling.consumer not in child_ids:
                raise ValueError(
                    f"coupling consumer {coupling.consumer!r} is not a child of {submodel_id!r}"
                )
        self.couplings = list(couplings)
        self._pending: dict[str, list[Message]] = {c.id: [] for c in self._children}
        self._tick = 0
        validate_tree(self)

    def children(self) -> Sequence[Submodel]:
        return tuple(self._children)

    def initialize(self, seed: int) -> None:
        for child in self._children:
            child.initialize(seed)
        self._pending = {c.id: [] for c in self._children}
        self._tick = 0

    def _route(self, messages: Sequence[Message], outbox: list[Message]) -> None:
        for msg in messages:
            routed = False
            for coupling in self.couplings:
                if coupling.producer == msg.src and coupling.channel == msg.channel:
                    self._pending[coupling.consumer].append(msg)
                    routed = True
            if not routed:
                outbox.append(msg)

    def step(self, from_tick: int, step_ticks: int, inbox: Sequence[Message]) -> list[Message]:
        if step_ticks % self.step_ticks != 0:
            raise ScheduleMismatch(
                f"composite {self.id!r} stepped by {step_ticks}, "
                f"not a multiple of its step {self.step_ticks}"
            )
        outbox: list[Message] = []
        # Inbound messages are routed by the same coupling table; anything
        # unmatched is not for this subtree and passes through.
        self._route(inbox, outbox)
        for offset in range(step_ticks):
            emitted: list[Message] = []
            for child in self._children:
                if offset % child.step_ticks != 0:
                    continue
                delivery = self._pending[child.id]
                self._pending[child.id] = []
                emitted.extend(child.step(from_tick + offset, child.step_ticks, delivery))
            self._route(emitted, outbox)
        self._tick = from_tick + step_ticks
        return outbox

    def observe(self) -> ObservationRecord:
        """Aggregate view: numeric labels summed over children, in
        first-seen order."""
        totals: dict[str, Any] = {}
        order: list[str] = []
        for child in self._children:
            for label, value in child.observe().named_values:
                if label not in totals:
                    totals[label] = value
                    order.append(label)
                else:
                    totals[label] = totals[label] + value
        values = tuple((label, totals[label]) for label in order)
        return ObservationRecord(self._tick, self.id, values, mode_tag="composite")

    def local_snapshot(self) -> Snapshot:
        state = {
            "tick": self._tick,
            "pending": {
                cid: [(m.src, m.channel, m.payload) for m in msgs]
                for cid, msgs in self._pending.items()
            },
        }
        return make_snapshot(self.id, self._tick, state)

    def local_restore(self, snapshot: Snapshot) -> None:
        state = snapshot_state(snapshot)
        self._tick = state["tick"]
        self._pending = {
            cid: [Message(src, channel, payload) for src, channel, payload in triples]
            for cid, triples in state["pending"].items()
        }

    def snapshot(self) -> Snapshot:
        # Deep snapshot: the subtree's per-node snapshots, so that
        # restore(snapshot()) is an identity on the whole subtree.
        return make_snapshot(self.id, self._tick, snapshot_tree(self))

    def restore(self, snapshot: Snapshot) -> None:
        restore_tree(self, snapshot_state(snapshot))


def snapshot_tree(root: Submodel) -> list[Snapshot]:
    """One snapshot per node, in preorder."""
    return [node.local_snapshot() for node in walk(root)]


def restore_tree(root: Submodel, snapshots: Sequence[Snapshot]) -> None:
    """Restore every node from a snapshot set taken by snapshot_tree."""
    by_id = {snap.submodel_id: snap for snap in snapshots}
    node_ids = [node.id for node in walk(root)]
    missing = [nid for nid in node_ids if nid not in by_id]
    if missing:
        raise SnapshotSetIncomplete(f"missing snapshots for {missing}")
    unknown = sorted(set(by_id) - set(node_ids))
    if unknown:
        raise SnapshotSetIncomplete(f"snapshots for unknown nodes {unknown}")
    ticks = {snap.tick for snap in snapshots}
    if len(ticks) > 1:
        raise TickMismatch(f"snapshot set spans ticks {sorted(ticks)}")
    for node in walk(root):
        node.local_restore(by_id[node.id])


def advance(
    node: Submodel, from_tick: int, window_ticks: int, inbox: Sequence[Message]
) -> list[Message]:
    """Step a submodel through a window as repeated native-size steps.

    The inbox is delivered at the first substep only; a submodel is never
    stepped with anything but its own step_ticks.
    """
    if window_ticks % node.step_ticks != 0:
        raise ScheduleMismatch(
            f"window {window_ticks} is not a multiple of {node.id!r} "
            f"step {node.step_ticks}"
        )
    outbox: list[Message] = []
    for k in range(window_ticks // node.step_ticks):
        delivery = inbox if k == 0 else ()
        outbox.extend(node.step(from_tick + k * node.step_ticks, node.step_ticks, delivery))
    return outbox
