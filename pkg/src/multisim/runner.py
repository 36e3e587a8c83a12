"""Run front end: executor selection, trajectory output, YAML scenario
configs and the command line.

Trajectory CSV is bit-exact: header ``tick,submodel_id,mode_tag,<labels...>``,
reals printed with 9 significant digits, UTF-8, LF line endings.  The
trajectory digest (BLAKE2b-64 of the CSV bytes) is what the executor
equivalence and replay checks compare.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import yaml

from .epidemic import EpidemicRegion, conservation_check, publish_global_infection
from .errors import ConfigError, SimulationError
from .exchange import FilePipe, PipeSchema, SharedStore, fresh_pipe_dir
from .kernel import Composite, ObservationRecord, SimClock, Submodel
from .models import DecaySubmodel, SirParams
from .multiscale import STRATEGIES, SwitchPolicy
from .orchestration import (
    Controller,
    DirectorOnDemand,
    DirectorOnHold,
    ParallelExecutor,
    RunConfig,
    RunLog,
    SequentialExecutor,
)

TRAJECTORY_NAME = "trajectory.csv"
META_NAME = "trajectory.meta.json"
LOG_NAME = "run.log"


# --- executors -----------------------------------------------------------------

@dataclass(frozen=True)
class ExecutorMode:
    """Sequential, or parallel over a fixed number of execution units."""

    kind: str
    units: int = 1

    def __post_init__(self):
        if self.kind not in ("sequential", "parallel"):
            raise ConfigError(f"unknown executor mode {self.kind!r}")
        if self.units < 1:
            raise ConfigError("units must be >= 1")

    @property
    def label(self) -> str:
        return self.kind if self.kind == "sequential" else f"parallel({self.units})"

    def build(self):
        if self.kind == "sequential":
            return SequentialExecutor()
        return ParallelExecutor(self.units)


# --- trajectory ------------------------------------------------------------------

def format_value(value) -> str:
    if isinstance(value, bool):
        raise ValueError("boolean observation values are not supported")
    if isinstance(value, int):
        return str(value)
    return "%.9g" % float(value)


def trajectory_csv(records: list[ObservationRecord]) -> str:
    """Canonical CSV text; label columns appear in first-seen order."""
    labels: list[str] = []
    for record in records:
        for label in record.labels:
            if label not in labels:
                labels.append(label)
    lines = ["tick,submodel_id,mode_tag," + ",".join(labels)]
    for record in records:
        values = dict(record.named_values)
        cells = [str(record.tick), record.submodel_id, record.mode_tag]
        cells.extend(
            format_value(values[label]) if label in values else "" for label in labels
        )
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Trajectory:
    """Observation records of one run plus the metadata that reproduces it."""

    records: tuple[ObservationRecord, ...]
    seed: int
    config_digest: str
    mode: str

    def csv_text(self) -> str:
        return trajectory_csv(list(self.records))

    def digest(self) -> str:
        return hashlib.blake2b(
            self.csv_text().encode("utf-8"), digest_size=8
        ).hexdigest()

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "config_digest": self.config_digest,
            "mode": self.mode,
            "records": len(self.records),
            "trajectory_digest": self.digest(),
        }


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).hexdigest()


# --- scenario construction ----------------------------------------------------------

@dataclass
class Scenario:
    tree: Submodel
    clock: SimClock
    barrier_hooks: list
    checkpoint_hooks: list
    consistency_check: object
    kind: str
    store: SharedStore


def _require(section: dict, key: str, context: str):
    if key not in section:
        raise ConfigError(f"missing {key!r} in {context}")
    return section[key]


def _switch_policy(defaults: dict, overrides: dict) -> SwitchPolicy | None:
    merged = {**defaults, **{k: v for k, v in overrides.items() if k in
                             ("theta_up", "theta_down", "dwell_ticks", "strategy")}}
    if not merged:
        return None
    if overrides.get("switchable") is False:
        return None
    try:
        return SwitchPolicy(
            theta_up=float(_require(merged, "theta_up", "switch policy")),
            theta_down=float(_require(merged, "theta_down", "switch policy")),
            dwell_ticks=int(merged.get("dwell_ticks", 0)),
            strategy=str(merged.get("strategy", "zoom")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_scenario(config: dict, run_config: RunConfig) -> Scenario:
    """Assemble the model tree and controller hooks described by a parsed
    config mapping."""
    clock_section = config.get("clock", {})
    quantum = clock_section.get("quantum_seconds", "1")
    try:
        clock = SimClock(quantum)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad quantum_seconds {quantum!r}: {exc}") from exc

    tree_section = config.get("tree", {})
    kind = tree_section.get("kind", "sir_regions")
    store = SharedStore()

    if kind == "decay":
        leaves_spec = _require(tree_section, "leaves", "tree section")
        children = [
            DecaySubmodel(
                _require(spec, "id", "decay leaf"),
                clock.quantum_seconds,
                float(spec.get("y0", 1.0)),
                float(spec.get("rate", 1.0)),
                step_ticks=int(spec.get("step_ticks", 1)),
            )
            for spec in leaves_spec
        ]
        tree = Composite("root", children)
        return Scenario(tree, clock, [], [], None, kind, store)

    if kind not in ("sir_regions", "sir_directed"):
        raise ConfigError(f"unknown tree kind {kind!r}")

    params_section = config.get("params", {})
    switch_section = config.get("switch", {})
    regions_spec = _require(tree_section, "regions", "tree section")
    if not regions_spec:
        raise ConfigError("tree.regions must list at least one region")
    mixing = float(tree_section.get("mixing", 0.0))

    children = []
    total = 0
    for spec in regions_spec:
        region_id = _require(spec, "id", "region")
        merged = {**params_section, **spec}
        try:
            params = SirParams(
                beta=float(_require(merged, "beta", f"region {region_id!r}")),
                gamma=float(_require(merged, "gamma", f"region {region_id!r}")),
                n_total=int(_require(merged, "n_total", f"region {region_id!r}")),
            )
            region = EpidemicRegion(
                region_id,
                params,
                i0=int(merged.get("i0", 0)),
                quantum=clock.quantum_seconds,
                policy=_switch_policy(switch_section, spec),
                step_ticks=int(merged.get("step_ticks", 1)),
                initial_mode=str(merged.get("initial_mode", "micro")),
                mixing=float(merged.get("mixing", mixing)),
                macro_share=float(merged.get("macro_share", 0.5)),
                behavior=str(merged.get("behavior", "default")),
                store=store,
            )
        except ValueError as exc:
            raise ConfigError(f"region {region_id!r}: {exc}") from exc
        total += params.n_total
        if kind == "sir_directed":
            director = str(spec.get("director", "on_hold"))
            if director == "on_hold":
                region = DirectorOnHold(f"dir_{region_id}", region)
            elif director == "on_demand":
                region = DirectorOnDemand(f"dir_{region_id}", [region])
            elif director != "none":
                raise ConfigError(f"unknown director realization {director!r}")
        children.append(region)

    tree = Composite("root", children)
    return Scenario(
        tree,
        clock,
        [publish_global_infection],
        [],
        conservation_check(total),
        kind,
        store,
    )


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        config = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return config


def run_config_from(config: dict, **overrides) -> RunConfig:
    section = dict(config.get("run", {}))
    section.update({k: v for k, v in overrides.items() if v is not None})
    out_dir = section.get("out_dir") or (config.get("output", {}) or {}).get("dir")
    if overrides.get("out_dir"):
        out_dir = overrides["out_dir"]
    try:
        return RunConfig(
            seed=int(section.get("seed", 0)),
            end_tick=int(_require(section, "end_tick", "run section")),
            checkpoint_interval=int(_require(section, "checkpoint_interval", "run section")),
            mode=str(section.get("mode", "sequential")),
            units=int(section.get("units", 1)),
            out_dir=out_dir,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad run section: {exc}") from exc


# --- execution --------------------------------------------------------------------

def execute(
    scenario: Scenario,
    run_config: RunConfig,
    cfg_digest: str = "",
    run_log: RunLog | None = None,
) -> Trajectory:
    """Run one scenario under the configured executor; sequential and
    parallel modes yield byte-identical trajectories."""
    mode = ExecutorMode(run_config.mode, run_config.units)
    controller = Controller(
        scenario.tree,
        scenario.clock,
        run_config,
        store=scenario.store,
        executor=mode.build(),
        run_log=run_log,
        barrier_hooks=scenario.barrier_hooks,
        checkpoint_hooks=scenario.checkpoint_hooks,
        consistency_check=scenario.consistency_check,
    )
    records = controller.run()
    return Trajectory(tuple(records), run_config.seed, cfg_digest, mode.label)


def run_from_config(config: dict, **overrides) -> tuple[Trajectory, RunLog]:
    """Config mapping in, (trajectory, run log) out; used by the CLI and by
    the equivalence tests."""
    run_config = run_config_from(config, **overrides)
    scenario = build_scenario(config, run_config)
    run_log = RunLog()
    if run_config.out_dir and scenario.kind in ("sir_regions", "sir_directed"):
        run_id = f"seed{run_config.seed}"
        pipe_dir = fresh_pipe_dir(run_config.out_dir, run_id)
        schema = PipeSchema("sir_totals", (("tick", "int"), ("S", "int"), ("I", "int"), ("R", "int")))
        pipe = FilePipe(pipe_dir / "summary.pipe", schema)

        def pipe_sink(controller, tick, observations):
            totals = {"S": 0, "I": 0, "R": 0}
            for record in observations:
                for label in totals:
                    if label in record.labels:
                        totals[label] += record.value(label)
            pipe.write({"tick": tick, **totals})

        scenario.checkpoint_hooks.append(pipe_sink)
    trajectory = execute(scenario, run_config, config_digest(config), run_log)
    return trajectory, run_log


def write_outputs(trajectory: Trajectory, run_log: RunLog, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / TRAJECTORY_NAME).write_bytes(trajectory.csv_text().encode("utf-8"))
    (out / META_NAME).write_text(
        json.dumps(trajectory.metadata(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    run_log.save(out / LOG_NAME)
    return out


# --- command line --------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multisim",
        description="Multilevel hybrid simulation runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write outputs")
    run_p.add_argument("--config", required=True, help="YAML scenario config")
    run_p.add_argument("--seed", type=int, default=None, help="override run seed")
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument("--mode", choices=("sequential", "parallel"), default=None)
    run_p.add_argument("--units", type=int, default=None, help="parallel execution units")
    run_p.add_argument("--time", action="store_true", help="print a wall-clock summary")

    val_p = sub.add_parser("validate", help="check a config without running it")
    val_p.add_argument("--config", required=True)

    rep_p = sub.add_parser("replay", help="recompute a trajectory digest and compare")
    rep_p.add_argument("--trajectory", required=True, help="path to trajectory.csv")
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0

    try:
        if args.command == "validate":
            config = load_config(args.config)
            run_config = run_config_from(config)
            build_scenario(config, run_config)
            print(f"config {args.config} OK")
            return 0

        if args.command == "replay":
            csv_path = Path(args.trajectory)
            meta_path = csv_path.with_name(META_NAME)
            try:
                csv_bytes = csv_path.read_bytes()
                meta = json.loads(meta_path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read trajectory: {exc}") from exc
            recomputed = hashlib.blake2b(csv_bytes, digest_size=8).hexdigest()
            if recomputed != meta.get("trajectory_digest"):
                print(
                    f"digest mismatch: recomputed {recomputed}, "
                    f"recorded {meta.get('trajectory_digest')}",
                    file=sys.stderr,
                )
                return 2
            print(f"trajectory digest OK ({recomputed})")
            return 0

        # run
        config = load_config(args.config)
        started = time.perf_counter()
        trajectory, run_log = run_from_config(
            config,
            seed=args.seed,
            mode=args.mode,
            units=args.units,
            out_dir=args.out,
        )
        elapsed = time.perf_counter() - started
        run_config = run_config_from(
            config, seed=args.seed, mode=args.mode, units=args.units, out_dir=args.out
        )
        if run_config.out_dir:
            out = write_outputs(trajectory, run_log, run_config.out_dir)
            print(f"wrote {out / TRAJECTORY_NAME}")
        print(
            f"run complete: seed={trajectory.seed} mode={trajectory.mode} "
            f"records={len(trajectory.records)} digest={trajectory.digest()}"
        )
        if args.time:
            print(f"wall-clock: {elapsed:.3f} s")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SimulationError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
