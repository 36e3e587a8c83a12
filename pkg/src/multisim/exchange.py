"""Information exchange between submodels: futures, temporary-file pipes,
a versioned blackboard store, and conservation-exact rounding.

The rounding pieces (apportion, ConservedTally) are the currency of every
continuous-to-discrete handoff in this package: whatever real-valued
dynamics do, label counts are integers whose sum never drifts.
"""

from __future__ import annotations

import math
import os
import shutil
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import (
    DegenerateWeights,
    IoFailure,
    KeyAbsent,
    MassLeak,
    NegativeCount,
    NotOwner,
    OrphanedFuture,
    SchemaViolation,
)

REAL_FORMAT = "%.9g"  # fixed 9-significant-digit encoding for reals on the wire


# --- Return Value / futures ----------------------------------------------

class Future:
    """Single-assignment result slot; reading blocks until resolution.

    Transitions exactly once, Pending -> Ready or Pending -> Failed, and is
    safe to resolve on one execution unit and read on another.
    """

    def __init__(self):
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._state = "pending"
        self._value: Any = None
        self._error: BaseException | None = None

    @property
    def status(self) -> str:
        return self._state

    def _transition(self, state: str, value: Any, error: BaseException | None) -> None:
        with self._lock:
            if self._state != "pending":
                raise RuntimeError(f"future already {self._state}")
            self._state = state
            self._value = value
            self._error = error
        self._event.set()

    def resolve(self, value: Any) -> None:
        self._transition("ready", value, None)

    def fail(self, error: BaseException) -> None:
        self._transition("failed", None, error)

    def abandon(self, reason: str = "producer terminated without resolving") -> None:
        """Mark as failed with OrphanedFuture; no-op if already settled."""
        with self._lock:
            if self._state != "pending":
                return
            self._state = "failed"
            self._error = OrphanedFuture(reason)
        self._event.set()

    def get(self, timeout: float | None = None) -> Any:
        """Return the value, waiting while pending."""
        if not self._event.wait(timeout):
            raise TimeoutError("future still pending after timeout")
        if self._state == "failed":
            raise self._error
        return self._value


# --- Pipe through temporary files ----------------------------------------

@dataclass(frozen=True)
class PipeSchema:
    """Ordered field layout of one pipe; kinds are 'int', 'real' or 'str'."""

    schema_id: str
    fields: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for _, kind in self.fields:
            if kind not in ("int", "real", "str"):
                raise ValueError(f"unknown field kind {kind!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)


def fresh_pipe_dir(out_dir: str | Path, run_id: str) -> Path:
    """Create the run-scoped pipe directory, deleting any stale contents
    from an aborted previous run."""
    pipe_dir = Path(out_dir) / "pipes" / run_id
    if pipe_dir.exists():
        shutil.rmtree(pipe_dir)
    pipe_dir.mkdir(parents=True)
    return pipe_dir


class FilePipe:
    """Append-only record pipe over a temporary file, one producer and one
    consumer.

    Each record is one UTF-8 line of ``key=value`` pairs in schema order;
    a sidecar ``<pipe>.seq`` file holds the decimal count of committed
    records and is what tells the consumer new data is available.
    """

    def __init__(self, path: str | Path, schema: PipeSchema):
        self.path = Path(path)
        self.schema = schema
        self.seq_path = Path(str(self.path) + ".seq")
        self._written = 0
        self._consumed = 0

    def _encode(self, record: Mapping[str, Any]) -> str:
        if set(record) != set(self.schema.names):
            raise SchemaViolation(
                f"record fields {sorted(record)} != schema fields {sorted(self.schema.names)}"
            )
        parts = []
        for name, kind in self.schema.fields:
            value = record[name]
            if kind == "int":
                if not isinstance(value, int) or isinstance(value, bool):
                    raise SchemaViolation(f"field {name!r} expects int, got {value!r}")
                text = str(value)
            elif kind == "real":
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise SchemaViolation(f"field {name!r} expects real, got {value!r}")
                text = REAL_FORMAT % float(value)
            else:
                if not isinstance(value, str):
                    raise SchemaViolation(f"field {name!r} expects str, got {value!r}")
                if any(c in value for c in (" ", "=", "\n")):
                    raise SchemaViolation(f"field {name!r} value {value!r} not encodable")
                text = value
            parts.append(f"{name}={text}")
        return " ".join(parts)

    def write(self, record: Mapping[str, Any]) -> None:
        """Append one record and advance the committed-record counter."""
        line = self._encode(record)
        try:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
            self._written += 1
            tmp = self.seq_path.with_name(self.seq_path.name + ".tmp")
            tmp.write_text(str(self._written), encoding="utf-8")
            os.replace(tmp, self.seq_path)
        except OSError as exc:
            raise IoFailure(f"pipe write to {self.path} failed: {exc}") from exc

    def _decode(self, line: str) -> dict[str, Any]:
        values: dict[str, Any] = {}
        pieces = line.split(" ")
        if len(pieces) != len(self.schema.fields):
            raise SchemaViolation(f"malformed pipe line: {line!r}")
        for (name, kind), piece in zip(self.schema.fields, pieces):
            key, sep, raw = piece.partition("=")
            if not sep or key != name:
                raise SchemaViolation(f"malformed pipe line: {line!r}")
            if kind == "int":
                values[name] = int(raw)
            elif kind == "real":
                values[name] = float(raw)
            else:
                values[name] = raw
        return values

    def committed(self) -> int:
        try:
            return int(self.seq_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return 0
        except OSError as exc:
            raise IoFailure(f"pipe sequence read failed: {exc}") from exc

    def poll(self) -> list[dict[str, Any]]:
        """All records appended since the previous poll, in write order."""
        committed = self.committed()
        if committed <= self._consumed:
            return []
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise IoFailure(f"pipe read from {self.path} failed: {exc}") from exc
        new = [self._decode(line) for line in lines[self._consumed:committed]]
        self._consumed = committed
        return new


# --- Shared memory / blackboard store ------------------------------------

class SharedStore:
    """Versioned (namespace, key) blackboard with one declared writer per
    namespace.

    Ownership discipline replaces locking visible to models: writers are
    serialized per namespace by construction, readers always get a
    consistent (value, version) pair.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._entries: dict[tuple[str, str], tuple[Any, int, int]] = {}
        self._owners: dict[str, str] = {}

    def declare_owner(self, namespace: str, writer: str) -> None:
        with self._lock:
            current = self._owners.get(namespace)
            if current is not None and current != writer:
                raise NotOwner(f"namespace {namespace!r} already owned by {current!r}")
            self._owners[namespace] = writer

    def put(self, namespace: str, key: str, value: Any, writer: str, tick: int = 0) -> int:
        """Write a value; the first writer to a namespace claims it."""
        with self._lock:
            owner = self._owners.setdefault(namespace, writer)
            if owner != writer:
                raise NotOwner(
                    f"writer {writer!r} does not own namespace {namespace!r} "
                    f"(owner is {owner!r})"
                )
            if isinstance(value, ConservedTally):
                value = value.copy()
            _, version, _ = self._entries.get((namespace, key), (None, 0, 0))
            version += 1
            self._entries[(namespace, key)] = (value, version, tick)
            return version

    def get(self, namespace: str, key: str) -> tuple[Any, int]:
        with self._lock:
            try:
                value, version, _ = self._entries[(namespace, key)]
            except KeyError:
                raise KeyAbsent(f"({namespace!r}, {key!r}) was never written") from None
            if isinstance(value, ConservedTally):
                value = value.copy()
            return value, version

    def get_or(self, namespace: str, key: str, default: Any) -> Any:
        try:
            value, _ = self.get(namespace, key)
            return value
        except KeyAbsent:
            return default

    def checkpoint(self) -> dict:
        """Copy of the full store contents, for rollback."""
        with self._lock:
            entries = {
                k: (v.copy() if isinstance(v, ConservedTally) else v, ver, tick)
                for k, (v, ver, tick) in self._entries.items()
            }
            return {"entries": entries, "owners": dict(self._owners)}

    def restore(self, state: dict) -> None:
        with self._lock:
            self._entries = {
                k: (v.copy() if isinstance(v, ConservedTally) else v, ver, tick)
                for k, (v, ver, tick) in state["entries"].items()
            }
            self._owners = dict(state["owners"])


# --- Rounding strategies ---------------------------------------------------

def apportion(weights: Sequence[float], total: int) -> list[int]:
    """Integers summing exactly to ``total``, proportional to ``weights``,
    by the largest-remainder method.

    Proportional shares are floored, then the leftover units go to the
    largest fractional remainders, ties broken by lowest index.
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ValueError("weights must be finite and non-negative")
    if total == 0:
        return [0] * len(weights)
    weight_sum = math.fsum(weights)
    if weight_sum <= 0:
        raise DegenerateWeights(f"cannot apportion {total} units over zero weights")
    shares = [total * w / weight_sum for w in weights]
    counts = [math.floor(s) for s in shares]
    leftover = total - sum(counts)
    by_remainder = sorted(
        range(len(weights)), key=lambda i: (-(shares[i] - counts[i]), i)
    )
    for i in by_remainder[:leftover]:
        counts[i] += 1
    return counts


class ConservedTally:
    """Labeled integer counts plus per-label real residuals.

    sum(counts) == total after every operation, exactly; counts[i] +
    residuals[i] tracks the continuous value owed to label i.  Residuals
    stay in [-0.5, 0.5) whenever an integer assignment with that property
    exists; when none does (possible with three or more labels), the
    closest assignment is chosen and the excursion is always below one
    whole unit.
    """

    __slots__ = ("labels", "counts", "residuals", "total")

    def __init__(
        self,
        labels: Sequence[str],
        counts: Sequence[int],
        residuals: Sequence[float] | None = None,
        total: int | None = None,
    ):
        self.labels = tuple(labels)
        self.counts = [int(c) for c in counts]
        if len(self.counts) != len(self.labels):
            raise ValueError("one count per label required")
        if any(c < 0 for c in self.counts):
            raise NegativeCount(f"negative count in {self.counts}")
        self.residuals = [0.0] * len(self.labels) if residuals is None else [float(r) for r in residuals]
        if len(self.residuals) != len(self.labels):
            raise ValueError("one residual per label required")
        self.total = sum(self.counts) if total is None else int(total)
        if sum(self.counts) != self.total:
            raise ValueError(f"counts {self.counts} do not sum to total {self.total}")

    @classmethod
    def from_counts(cls, labels: Sequence[str], counts: Sequence[int]) -> "ConservedTally":
        return cls(labels, counts)

    def copy(self) -> "ConservedTally":
        return ConservedTally(self.labels, self.counts, self.residuals, self.total)

    def count(self, label: str) -> int:
        return self.counts[self.labels.index(label)]

    @property
    def continuous_view(self) -> list[float]:
        return [c + r for c, r in zip(self.counts, self.residuals)]

    def fraction(self, label: str) -> float:
        if self.total == 0:
            return 0.0
        return self.counts[self.labels.index(label)] / self.total

    def absorb(self, continuous_delta: Sequence[float]) -> "ConservedTally":
        """Apply a zero-sum continuous delta, moving whole units between
        labels whenever a residual leaves [-0.5, 0.5).

        Units are taken from the most negative residual and given to the
        most positive one (ties to the lowest index), so the integer counts
        stay as close as an integer vector can to the continuous values.
        """
        if len(continuous_delta) != len(self.labels):
            raise ValueError("one delta per label required")
        leak = math.fsum(continuous_delta)
        if not math.isfinite(leak) or abs(leak) > 1e-9:
            raise MassLeak(f"delta sums to {leak!r}, not 0 within 1e-9")
        view = [
            c + r + d for c, r, d in zip(self.counts, self.residuals, continuous_delta)
        ]
        # Nearest integer under the [-0.5, 0.5) convention (halves round up).
        counts = [math.floor(v + 0.5) for v in view]
        residuals = [v - n for v, n in zip(view, counts)]
        surplus = sum(counts) - self.total
        indices = range(len(counts))
        while surplus > 0:
            donor = min(indices, key=lambda i: (residuals[i], i))
            if counts[donor] <= 0:
                raise NegativeCount(
                    f"label {self.labels[donor]!r} cannot donate below zero"
                )
            counts[donor] -= 1
            residuals[donor] += 1.0
            surplus -= 1
        while surplus < 0:
            receiver = min(indices, key=lambda i: (-residuals[i], i))
            counts[receiver] += 1
            residuals[receiver] -= 1.0
            surplus += 1
        if any(n < 0 for n in counts):
            bad = self.labels[[n < 0 for n in counts].index(True)]
            raise NegativeCount(f"label {bad!r} driven below zero")
        return ConservedTally(self.labels, counts, residuals, self.total)

    def __eq__(self, other):
        if not isinstance(other, ConservedTally):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.counts == other.counts
            and self.residuals == other.residuals
            and self.total == other.total
        )

    def __repr__(self):
        pairs = ", ".join(
            f"{label}={c}{r:+.3f}" for label, c, r in zip(self.labels, self.counts, self.residuals)
        )
        return f"ConservedTally({pairs}, total={self.total})"
