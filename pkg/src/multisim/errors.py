"""Exception hierarchy shared by all framework modules."""

from __future__ import annotations


class SimulationError(Exception):
    """Base class for every error raised by this package."""


# --- time / kernel ------------------------------------------------------

class NonCommensurableStep(SimulationError):
    """A local duration is not an integer multiple of the clock quantum."""


class ScheduleMismatch(SimulationError):
    """A child's step size does not divide its parent's step size."""


class SnapshotSetIncomplete(SimulationError):
    """A tree restore was attempted without one snapshot per node."""


class TickMismatch(SimulationError):
    """Snapshots in one restore set were taken at different ticks."""


class SubmodelFailure(SimulationError):
    """A submodel raised during a run; carries (submodel_id, tick)."""

    def __init__(self, submodel_id: str, tick: int, cause: BaseException):
        super().__init__(f"submodel {submodel_id!r} failed at tick {tick}: {cause!r}")
        self.submodel_id = submodel_id
        self.tick = tick
        self.cause = cause


# --- orchestration ------------------------------------------------------

class WorkerFailed(SimulationError):
    """A delegated task raised inside a worker."""

    def __init__(self, task_name: str, cause: BaseException):
        super().__init__(f"task {task_name!r} failed: {cause!r}")
        self.task_name = task_name
        self.cause = cause


class PoolShutDown(SimulationError):
    """A task was submitted to a worker pool after shutdown."""


class BarrierPoisoned(SimulationError):
    """A checkpoint barrier was poisoned by a failing participant."""


class NoSuchCheckpoint(SimulationError):
    """Rollback was requested to a tick with no stored snapshot set."""


# --- exchange -----------------------------------------------------------

class OrphanedFuture(SimulationError):
    """The producer of a future terminated without resolving it."""


class SchemaViolation(SimulationError):
    """A pipe record does not match the pipe's declared schema."""


class IoFailure(SimulationError):
    """A file pipe operation failed at the filesystem level."""


class NotOwner(SimulationError):
    """A store write came from a writer that does not own the namespace."""


class KeyAbsent(SimulationError):
    """A store read referenced a key that was never written."""


class DegenerateWeights(SimulationError):
    """Apportionment over all-zero weights with a positive total."""


class MassLeak(SimulationError):
    """A tally delta does not sum to zero within tolerance."""


class NegativeCount(SimulationError):
    """A conserving transfer would drive a label count below zero."""


# --- multiscale ---------------------------------------------------------

class AlreadyAggregated(SimulationError):
    """Aggregation was requested on an inactive population."""


class RetainedMissing(SimulationError):
    """Disaggregation needs a retained population that was not supplied."""


class CountMismatch(SimulationError):
    """Internal assertion: disaggregated counts differ from the tally."""


class UnsupportedQuery(SimulationError):
    """The macro-as-micro adapter cannot answer an agent-identity query."""


# --- models -------------------------------------------------------------

class NonFiniteDerivative(SimulationError):
    """The ODE field evaluated to a non-finite value."""


class UnknownBehavior(SimulationError):
    """An agent referenced a behavior id absent from the registry."""


# --- runner -------------------------------------------------------------

class ConfigError(SimulationError):
    """A run configuration failed validation."""
