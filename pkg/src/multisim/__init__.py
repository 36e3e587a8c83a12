"""Multilevel modeling and simulation framework.

Submodels of different paradigms (agent-based, equation-based) are
composed into a tree, orchestrated by an external controller through
checkpoint barriers with rollback, and may switch their own resolution at
run time while conserving integer population counts exactly.
"""

from .errors import SimulationError
from .exchange import ConservedTally, FilePipe, Future, PipeSchema, SharedStore, apportion
from .kernel import (
    Composite,
    Coupling,
    Message,
    ObservationRecord,
    SimClock,
    Snapshot,
    Submodel,
    restore_tree,
    snapshot_tree,
    ticks_for,
)
from .models import (
    BehaviorPolicy,
    BehaviorRegistry,
    DecayState,
    DecaySubmodel,
    EbmState,
    SirParams,
    abm_sir_step,
    decay_step,
    ebm_sir_step,
    rk4_step,
)
from .multiscale import (
    MacroAsMicroAdapter,
    MacroState,
    SwitchDecision,
    SwitchPolicy,
    aggregate,
    cohabit_step,
    disaggregate,
    evaluate_switch,
)
from .orchestration import (
    CheckpointBarrier,
    CheckpointSchedule,
    Controller,
    DirectorOnDemand,
    DirectorOnHold,
    RunConfig,
    RunLog,
    WorkerPool,
)
from .population import Agent, MicroPopulation
from .rng import CounterRng
from .runner import ExecutorMode, Trajectory, cli_main, execute

__version__ = "0.1.0"
