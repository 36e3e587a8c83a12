"""Run orchestration: the external Controller, checkpoint barriers with
rollback, and the Director-Worker realizations (on-hold and worker pool).

The Controller advances its participants window by window.  Within a
window participants never exchange data; outboxes are routed at the
closing checkpoint barrier (conservative synchronization), which is what
makes sequential and parallel execution bit-identical.  Rollback restores
the whole tree, the shared store and the clock from the snapshot set taken
at a checkpoint, and is also the recovery path when a post-window
consistency check fails.
"""

from __future__ import annotations

import os
import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .errors import (
    BarrierPoisoned,
    ConfigError,
    NoSuchCheckpoint,
    PoolShutDown,
    ScheduleMismatch,
    SimulationError,
    SubmodelFailure,
    WorkerFailed,
)
from .exchange import Future, SharedStore
from .kernel import (
    EVENT_CHANNEL,
    Composite,
    Message,
    ObservationRecord,
    SimClock,
    Snapshot,
    Submodel,
    leaves,
    restore_tree,
    snapshot_tree,
    validate_tree,
)

CONTROLLER_ID = "controller"


# --- run log -----------------------------------------------------------------

class RunLog:
    """Append-only, line-oriented event log.

    One event per line: ``tick=<n> event=<step|barrier|rollback|switch>
    id=<submodel>`` plus event-specific fields.  MULTISIM_LOG selects
    verbosity: ``quiet`` drops per-step lines, ``info`` (default) keeps
    everything the invariant audits need.
    """

    def __init__(self, verbosity: str | None = None):
        self.verbosity = verbosity or os.environ.get("MULTISIM_LOG", "info")
        if self.verbosity not in ("quiet", "info", "debug"):
            raise ConfigError(f"unknown MULTISIM_LOG level {self.verbosity!r}")
        self.lines: list[str] = []

    def log(self, tick: int, event: str, submodel_id: str, **fields) -> None:
        if event == "step" and self.verbosity == "quiet":
            return
        extra = "".join(f" {k}={v}" for k, v in fields.items())
        self.lines.append(f"tick={tick} event={event} id={submodel_id}{extra}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines))
            if self.lines:
                fh.write("\n")


def parse_log_line(line: str) -> dict[str, str]:
    return dict(piece.split("=", 1) for piece in line.split(" "))


def audit_barrier_safety(lines: Sequence[str]) -> tuple[int, list[str]]:
    """Check that every step event started strictly inside its checkpoint
    window: at or after the previous barrier, before the closing one.

    Returns (number of step events checked, violating lines).
    """
    checked = 0
    violations: list[str] = []
    window_start: int | None = None
    pending: list[tuple[int, str]] = []
    for line in lines:
        fields = parse_log_line(line)
        tick = int(fields["tick"])
        if fields["event"] == "step":
            pending.append((tick, line))
        elif fields["event"] == "barrier":
            for step_tick, step_line in pending:
                checked += 1
                if step_tick >= tick or (window_start is not None and step_tick < window_start):
                    violations.append(step_line)
            pending = []
            window_start = tick
        elif fields["event"] == "rollback":
            window_start = tick
            pending = []
    violations.extend(line for _, line in pending)  # steps beyond the last barrier
    return checked, violations


# --- schedule & config ---------------------------------------------------------

@dataclass(frozen=True)
class CheckpointSchedule:
    """Periodic lockstep synchronization points."""

    interval_ticks: int

    def __post_init__(self):
        if self.interval_ticks < 1:
            raise ConfigError("checkpoint interval must be >= 1 tick")

    def validate_participants(self, participants: Sequence[Submodel]) -> None:
        for part in participants:
            if self.interval_ticks % part.step_ticks != 0:
                raise ScheduleMismatch(
                    f"checkpoint interval {self.interval_ticks} is not a multiple "
                    f"of participant {part.id!r} step {part.step_ticks}"
                )

    def windows(self, end_tick: int) -> list[tuple[int, int]]:
        return [
            (start, start + self.interval_ticks)
            for start in range(0, end_tick, self.interval_ticks)
        ]


@dataclass(frozen=True)
class RunConfig:
    """What a single run needs beyond the model tree itself."""

    seed: int
    end_tick: int
    checkpoint_interval: int
    mode: str = "sequential"
    units: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.end_tick <= 0:
            raise ConfigError("end_tick must be positive")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint interval must be >= 1")
        if self.end_tick % self.checkpoint_interval != 0:
            raise ConfigError(
                f"end_tick {self.end_tick} is not a multiple of the checkpoint "
                f"interval {self.checkpoint_interval}"
            )
        if self.mode not in ("sequential", "parallel"):
            raise ConfigError(f"unknown executor mode {self.mode!r}")
        if self.units < 1:
            raise ConfigError("units must be >= 1")


# --- checkpoint barrier ---------------------------------------------------------

class CheckpointBarrier:
    """Arrival ledger for one group of lockstep participants.

    ``arrive(..., wait=True)`` blocks the caller until every registered
    participant has reached the same tick; a failure anywhere poisons the
    barrier and wakes the waiters with BarrierPoisoned.  The coordinator
    variant ``wait_all`` lets participants arrive without blocking, which
    is how the executor drives more participants than execution units.
    """

    def __init__(self, participant_ids: Sequence[str]):
        self._ids = list(participant_ids)
        if len(set(self._ids)) != len(self._ids):
            raise ValueError("duplicate participant ids")
        self._cond = threading.Condition()
        self._arrivals: dict[str, int] = {}
        self._poison: BaseException | None = None

    def _all_at(self, tick: int) -> bool:
        return all(self._arrivals.get(pid) == tick for pid in self._ids)

    def arrive(self, participant_id: str, tick: int, wait: bool = False) -> None:
        if participant_id not in self._ids:
            raise ValueError(f"unregistered participant {participant_id!r}")
        with self._cond:
            if self._poison is not None:
                raise BarrierPoisoned(str(self._poison))
            self._arrivals[participant_id] = tick
            self._cond.notify_all()
            if wait:
                self._cond.wait_for(lambda: self._all_at(tick) or self._poison is not None)
                if self._poison is not None:
                    raise BarrierPoisoned(str(self._poison))

    def poison(self, error: BaseException) -> None:
        with self._cond:
            if self._poison is None:
                self._poison = error
            self._cond.notify_all()

    def wait_all(self, tick: int, timeout: float | None = None) -> None:
        with self._cond:
            done = self._cond.wait_for(
                lambda: self._all_at(tick) or self._poison is not None, timeout
            )
            if self._poison is not None:
                raise BarrierPoisoned(str(self._poison))
            if not done:
                raise BarrierPoisoned(f"timed out waiting for tick {tick}")


# --- worker pool (Worker on Demand) ----------------------------------------------

@dataclass
class ConstructionCounter:
    constructed: int = 0
    destroyed: int = 0


def _task_name(task) -> str:
    return getattr(task, "name", None) or getattr(task, "__name__", None) or "task"


class Worker:
    """One execution worker; may retain a resident submodel across tasks."""

    def __init__(self, index: int, resident: Submodel | None, counter: ConstructionCounter):
        self.index = index
        self.resident = resident
        self.counter = counter
        counter.constructed += 1

    def run(self, task: Callable[[Submodel | None], Any]) -> Any:
        return task(self.resident)

    def destroy(self) -> None:
        self.counter.destroyed += 1


IDLE = "idle"
ASSIGNED = "assigned"


class WorkerPool:
    """Fixed pool of pre-initialized workers fed by a FIFO task queue.

    Every worker is created during pool construction and none afterwards
    (the construction counter proves it).  Idle workers keep the state
    their last task left behind.  Task assignment picks the lowest-index
    idle worker; when all are busy the task queues and the first worker to
    finish takes the queue head.
    """

    def __init__(
        self,
        capacity: int,
        resident_factory: Callable[[int], Submodel] | None = None,
        name: str = "pool",
    ):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.name = name
        self.counter = ConstructionCounter()
        self.workers = [
            Worker(k, resident_factory(k) if resident_factory else None, self.counter)
            for k in range(capacity)
        ]
        self._status = [IDLE] * capacity
        self._queue: deque[tuple[Callable, Future]] = deque()
        self._lock = threading.Lock()
        self._mailboxes: list[deque] = [deque() for _ in range(capacity)]
        self._wakeups = [threading.Event() for _ in range(capacity)]
        self._shutdown = False
        self._threads = [
            threading.Thread(target=self._serve, args=(k,), daemon=True, name=f"{name}-{k}")
            for k in range(capacity)
        ]
        for thread in self._threads:
            thread.start()

    @property
    def capacity(self) -> int:
        return len(self.workers)

    def status(self, index: int) -> str:
        return self._status[index]

    def idle_count(self) -> int:
        with self._lock:
            return sum(1 for s in self._status if s == IDLE)

    def queued_count(self) -> int:
        with self._lock:
            return len(self._queue)

    def assign(self, task: Callable[[Submodel | None], Any]) -> Future:
        """Hand a task to the lowest-index idle worker, or queue it FIFO."""
        future = Future()
        with self._lock:
            if self._shutdown:
                raise PoolShutDown(f"pool {self.name!r} is shut down")
            for k, status in enumerate(self._status):
                if status == IDLE:
                    self._status[k] = ASSIGNED
                    self._mailboxes[k].append((task, future))
                    self._wakeups[k].set()
                    return future
            self._queue.append((task, future))
        return future

    def _serve(self, k: int) -> None:
        worker = self.workers[k]
        while True:
            self._wakeups[k].wait()
            while True:
                with self._lock:
                    if self._mailboxes[k]:
                        task, future = self._mailboxes[k].popleft()
                    else:
                        self._wakeups[k].clear()
                        if self._shutdown:
                            return
                        break
                try:
                    result = worker.run(task)
                except BaseException as exc:  # noqa: BLE001 - forwarded via future
                    future.fail(WorkerFailed(_task_name(task), exc))
                else:
                    future.resolve(result)
                with self._lock:
                    if self._queue:
                        self._mailboxes[k].append(self._queue.popleft())
                    else:
                        self._status[k] = IDLE

    def shutdown(self) -> None:
        """Stop all workers; queued, unstarted tasks are abandoned."""
        with self._lock:
            if self._shutdown:
                return
            self._shutdown = True
            leftovers = list(self._queue)
            self._queue.clear()
            for wakeup in self._wakeups:
                wakeup.set()
        for task, future in leftovers:
            future.abandon("pool shut down before the task ran")
        for thread in self._threads:
            thread.join(timeout=5.0)
        for worker in self.workers:
            worker.destroy()


def pool_assign(pool: WorkerPool, task: Callable[[Submodel | None], Any]) -> Future:
    return pool.assign(task)


# --- directors -----------------------------------------------------------------

class DirectorOnHold(Composite):
    """Tree node that constructs a transient worker for each delegated
    task and suspends itself until the worker finishes.

    The activity log records every suspend/run/resume transition so tests
    can assert the director never computes while a worker is active.
    """

    def __init__(self, submodel_id: str, inner: Submodel):
        super().__init__(submodel_id, [inner])
        self.inner = inner
        self.counter = ConstructionCounter()
        self.activity: list[tuple[str, str, int]] = []
        self._suspended = False

    def delegate(self, task: Callable[[Submodel], Any], tick: int = 0) -> Any:
        """Run one task to completion on a freshly constructed worker."""
        if self._suspended:
            raise SimulationError(f"director {self.id!r} is already suspended")
        self.activity.append(("director", "suspend", tick))
        self._suspended = True
        worker = Worker(0, self.inner, self.counter)
        self.activity.append(("worker", "run", tick))
        try:
            try:
                return worker.run(task)
            except WorkerFailed:
                raise
            except BaseException as exc:  # noqa: BLE001
                raise WorkerFailed(f"{self.id}:{_task_name(task)}", exc) from exc
        finally:
            worker.destroy()
            self.activity.append(("worker", "done", tick))
            self._suspended = False
            self.activity.append(("director", "resume", tick))

    def step(self, from_tick: int, step_ticks: int, inbox: Sequence[Message]) -> list[Message]:
        if step_ticks % self.step_ticks != 0:
            raise ScheduleMismatch(
                f"director {self.id!r} stepped by {step_ticks}, "
                f"not a multiple of its step {self.step_ticks}"
            )
        self.activity.append(("director", "step", from_tick))

        def run_inner(resident: Submodel) -> list[Message]:
            outbox: list[Message] = []
            for k in range(step_ticks // resident.step_ticks):
                delivery = inbox if k == 0 else ()
                outbox.extend(
                    resident.step(from_tick + k * resident.step_ticks, resident.step_ticks, delivery)
                )
            return outbox

        run_inner.name = f"step[{from_tick},{from_tick + step_ticks})"
        outbox = self.delegate(run_inner, tick=from_tick)
        self._tick = from_tick + step_ticks
        return outbox


class DirectorOnDemand(Composite):
    """Tree node whose children are stepped by a fixed pre-allocated
    worker pool instead of transient workers."""

    def __init__(
        self,
        submodel_id: str,
        children: Sequence[Submodel],
        couplings=(),
        step_ticks: int | None = None,
    ):
        super().__init__(submodel_id, children, couplings, step_ticks)
        self.pool = WorkerPool(capacity=max(1, len(children)), name=f"{submodel_id}.pool")

    def step(self, from_tick: int, step_ticks: int, inbox: Sequence[Message]) -> list[Message]:
        if step_ticks % self.step_ticks != 0:
            raise ScheduleMismatch(
                f"director {self.id!r} stepped by {step_ticks}, "
                f"not a multiple of its step {self.step_ticks}"
            )
        outbox: list[Message] = []
        self._route(inbox, outbox)
        for offset in range(step_ticks):
            futures = []
            for child in self._children:
                if offset % child.step_ticks != 0:
                    continue
                delivery = self._pending[child.id]
                self._pending[child.id] = []

                def child_task(resident, child=child, delivery=delivery, offset=offset):
                    return child.step(from_tick + offset, child.step_ticks, delivery)

                child_task.name = f"{child.id}@{from_tick + offset}"
                futures.append(self.pool.assign(child_task))
            emitted: list[Message] = []
            for future in futures:
                emitted.extend(future.get())
            self._route(emitted, outbox)
        self._tick = from_tick + step_ticks
        return outbox

    def close(self) -> None:
        self.pool.shutdown()


# --- the Controller ---------------------------------------------------------------

@dataclass
class WindowResult:
    participant_id: str
    outbox: list[Message]
    events: list[tuple[int, str, str, dict]]  # (tick, event, id, extra fields)


@dataclass
class _Checkpoint:
    tick: int
    snapshots: dict[str, list[Snapshot]]  # participant id -> subtree snapshot set
    store_state: dict
    pending: dict[str, list[Message]]
    n_records: int


class SequentialExecutor:
    """All participants on one execution unit, in declaration order."""

    units = 1

    def start(self) -> None:
        pass

    def run_window(self, tasks: Sequence[Callable[[], WindowResult]]) -> list[WindowResult]:
        return [task() for task in tasks]

    def close(self) -> None:
        pass


class ParallelExecutor:
    """Participants dispatched to a fixed worker pool within each window;
    results are gathered in dispatch order, so the merge is deterministic."""

    def __init__(self, units: int):
        if units < 1:
            raise ConfigError("parallel executor needs units >= 1")
        self.units = units
        self.pool: WorkerPool | None = None

    def start(self) -> None:
        if self.pool is None:
            self.pool = WorkerPool(self.units, name="executor")

    def run_window(self, tasks: Sequence[Callable[[], WindowResult]]) -> list[WindowResult]:
        futures = [self.pool.assign(lambda resident, task=task: task()) for task in tasks]
        results = []
        errors: list[BaseException] = []
        for future in futures:
            try:
                results.append(future.get())
            except WorkerFailed as exc:
                errors.append(exc.cause)
        if errors:
            # Attribute the failure to the submodel that raised, not to the
            # poisoned barrier the other participants observed.
            for error in errors:
                if isinstance(error, SubmodelFailure):
                    raise error
            raise errors[0]
        return results

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None


class Controller:
    """External entity that owns scheduling, the clock, the shared store
    and all user-facing output of a run; it is not itself a submodel.

    Top-level couplings are flushed only at checkpoint barriers, so
    participants are free to run on independent execution units inside a
    window.  A failing consistency check triggers rollback to the previous
    checkpoint and re-execution of the window.
    """

    MAX_WINDOW_RETRIES = 3

    def __init__(
        self,
        tree: Submodel,
        clock: SimClock,
        config: RunConfig,
        store: SharedStore | None = None,
        executor=None,
        run_log: RunLog | None = None,
        barrier_hooks: Sequence[Callable] = (),
        checkpoint_hooks: Sequence[Callable] = (),
        consistency_check: Callable | None = None,
    ):
        validate_tree(tree)
        self.tree = tree
        self.clock = clock
        self.config = config
        self.store = store if store is not None else SharedStore()
        self.executor = executor if executor is not None else SequentialExecutor()
        self.run_log = run_log if run_log is not None else RunLog()
        self.barrier_hooks = list(barrier_hooks)
        self.checkpoint_hooks = list(checkpoint_hooks)
        self.consistency_check = consistency_check
        self.schedule = CheckpointSchedule(config.checkpoint_interval)
        if isinstance(tree, Composite):
            self.participants = list(tree.children())
            self.root_couplings = list(tree.couplings)
        else:
            self.participants = [tree]
            self.root_couplings = []
        self.schedule.validate_participants(self.participants)
        self.barrier = CheckpointBarrier([p.id for p in self.participants])
        self.records: list[ObservationRecord] = []
        self._pending: dict[str, list[Message]] = {p.id: [] for p in self.participants}
        self._checkpoints: dict[int, _Checkpoint] = {}

    # -- window execution ------------------------------------------------

    def _window_task(self, participant: Submodel, start: int, end: int) -> Callable[[], WindowResult]:
        inbox = self._pending[participant.id]
        barrier = self.barrier

        def run() -> WindowResult:
            events: list[tuple[int, str, str, dict]] = []
            outbox: list[Message] = []
            tick = start
            try:
                for k in range((end - start) // participant.step_ticks):
                    tick = start + k * participant.step_ticks
                    events.append((tick, "step", participant.id, {}))
                    delivery = inbox if k == 0 else ()
                    outbox.extend(participant.step(tick, participant.step_ticks, delivery))
            except SimulationError as exc:
                barrier.poison(exc)
                raise SubmodelFailure(participant.id, tick, exc) from exc
            except Exception as exc:  # noqa: BLE001
                barrier.poison(exc)
                raise SubmodelFailure(participant.id, tick, exc) from exc
            barrier.arrive(participant.id, end)
            return WindowResult(participant.id, outbox, events)

        return run

    def _flush_exchange(self, results: Sequence[WindowResult], tick: int) -> None:
        """Route window outboxes through the root couplings; called only at
        barriers (the conservative contract)."""
        for result in results:
            for tick_, event, submodel_id, extra in result.events:
                self.run_log.log(tick_, event, submodel_id, **extra)
            for msg in result.outbox:
                if msg.channel == EVENT_CHANNEL:
                    payload = dict(msg.payload)
                    event = payload.pop("event", "model")
                    event_tick = payload.pop("tick", tick)
                    self.run_log.log(event_tick, event, msg.src, **payload)
                    continue
                for coupling in self.root_couplings:
                    if coupling.producer == msg.src and coupling.channel == msg.channel:
                        self._pending[coupling.consumer].append(msg)

    def _observe_leaves(self, tick: int) -> list[ObservationRecord]:
        observations = []
        for leaf in leaves(self.tree):
            record = leaf.observe()
            if record.tick != tick:
                raise SimulationError(
                    f"{leaf.id!r} observed at tick {record.tick}, expected {tick}"
                )
            observations.append(record)
        return observations

    def _take_checkpoint(self, tick: int) -> None:
        self._checkpoints[tick] = _Checkpoint(
            tick=tick,
            snapshots={p.id: snapshot_tree(p) for p in self.participants},
            store_state=self.store.checkpoint(),
            pending={pid: list(msgs) for pid, msgs in self._pending.items()},
            n_records=len(self.records),
        )

    def checkpoint_ticks(self) -> list[int]:
        return sorted(self._checkpoints)

    def checkpoint_digests(self, tick: int) -> list[int]:
        try:
            checkpoint = self._checkpoints[tick]
        except KeyError:
            raise NoSuchCheckpoint(f"no checkpoint at tick {tick}") from None
        return [
            snap.digest
            for participant in self.participants
            for snap in checkpoint.snapshots[participant.id]
        ]

    def _barrier_bookkeeping(self, tick: int) -> bool:
        """Observation, hooks and consistency check at one checkpoint;
        returns False when the window must be rolled back and re-run."""
        self.run_log.log(tick, "barrier", CONTROLLER_ID)
        observations = self._observe_leaves(tick)
        self.records.extend(observations)
        for hook in self.barrier_hooks:
            hook(self, tick, observations)
        if self.consistency_check is not None and not self.consistency_check(self, tick, observations):
            return False
        self._take_checkpoint(tick)
        # Post-commit hooks never see a window that later rolls back.
        for hook in self.checkpoint_hooks:
            hook(self, tick, observations)
        return True

    def rollback_to(self, tick: int) -> None:
        """Restore tree, clock, store, pending exchange and trajectory to a
        checkpointed state."""
        checkpoint = self._checkpoints.get(tick)
        if checkpoint is None:
            raise NoSuchCheckpoint(f"no checkpoint at tick {tick}")
        for participant in self.participants:
            restore_tree(participant, checkpoint.snapshots[participant.id])
        self.store.restore(checkpoint.store_state)
        self._pending = {pid: list(msgs) for pid, msgs in checkpoint.pending.items()}
        del self.records[checkpoint.n_records:]
        self.clock.rollback_to(tick)
        self.run_log.log(tick, "rollback", CONTROLLER_ID)
        for later in [t for t in self._checkpoints if t > tick]:
            del self._checkpoints[later]

    def run(self) -> list[ObservationRecord]:
        """Advance the clock from 0 to end_tick; returns the observation
        records sorted by (tick, submodel_id)."""
        if self.clock.now_ticks != 0:
            raise SimulationError("controller requires a fresh clock at tick 0")
        self.tree.initialize(self.config.seed)
        self.records = []
        self._pending = {p.id: [] for p in self.participants}
        self._checkpoints = {}
        self.executor.start()
        try:
            if not self._barrier_bookkeeping(0):
                raise SimulationError("consistency check failed at tick 0")
            for start, end in self.schedule.windows(self.config.end_tick):
                retries = 0
                while True:
                    tasks = [self._window_task(p, start, end) for p in self.participants]
                    self._pending = {p.id: [] for p in self.participants}
                    results = self.executor.run_window(tasks)
                    self.barrier.wait_all(end)
                    self.clock.advance_to(end)
                    self._flush_exchange(results, end)
                    if self._barrier_bookkeeping(end):
                        break
                    retries += 1
                    if retries > self.MAX_WINDOW_RETRIES:
                        raise SimulationError(
                            f"window [{start},{end}) failed its consistency check "
                            f"{retries} times"
                        )
                    self.rollback_to(start)
        finally:
            self.executor.close()
        self.records.sort(key=lambda r: (r.tick, r.submodel_id))
        return list(self.records)
