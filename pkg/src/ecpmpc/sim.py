"""Closed-loop episodes and the navigation metrics computed from their logs."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .conformal import DEFAULT_GAMMA, DEFAULT_WINDOW, AcpLedger, CalibrationWindow, CoverageEvent, ObstacleAcpState
from .datasets import ScenarioExhausted, ScenarioTimeline
from .geometry import ControlInput, GoalSpec, ObstacleSet, VehicleState, min_distance, unicycle_step
from .planner import (
    InputCatalog,
    RadiusSnapshot,
    SafetyConfig,
    fallback_rollout,
    solve_acp_mpc,
    solve_ecp_mpc,
)
from .predictor import ConstantVelocityPredictor, History, Predictor

log = logging.getLogger(__name__)

CONTROLLERS = ("ecp", "acp")

STEP_COLUMNS = (
    "step", "frame", "x", "y", "theta", "v", "omega", "feasible", "plan_cost",
    "min_clearance", "collision", "n_obstacles", "plan",
)
RADII_COLUMNS = ("frame", "horizon", "prefix", "alpha", "radius")
COVERAGE_COLUMNS = ("frame", "horizon", "prefix", "covered", "alpha_before", "alpha_after")


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class EpisodeTruncated(RuntimeError):
    """The scenario ran out of frames before the episode ended."""

    def __init__(self, message: str, partial: "EpisodeLog"):
        super().__init__(message)
        self.log = partial


@dataclass
class EpisodeConfig:
    scenario: ScenarioTimeline
    start_state: VehicleState
    goal: GoalSpec
    controller: str = "ecp"
    t_max: int = 100
    history: int = 8
    horizon: int = 12
    n_epochs: int = 3
    window: int = DEFAULT_WINDOW
    gamma: float = DEFAULT_GAMMA
    target_alpha: float = 0.1
    initial_alpha: float | None = None  # defaults to target_alpha
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    seed: int = 0
    start_frame: int | None = None
    predictor: Predictor | None = None
    catalog: InputCatalog = field(default_factory=InputCatalog.grid)
    calibrate: str = "all"  # ECP: track every prefix, or only executed ones

    def validate(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ConfigError("controller", f"must be one of {CONTROLLERS}, got {self.controller!r}")
        for name in ("history", "horizon", "n_epochs", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.horizon % self.n_epochs:
            raise ConfigError("n_epochs", f"must divide horizon {self.horizon}")
        if not self.gamma > 0:
            raise ConfigError("gamma", f"must be positive, got {self.gamma}")
        if not 0 < self.target_alpha < 1:
            raise ConfigError("target_alpha", f"must lie in (0, 1), got {self.target_alpha}")
        if self.t_max <= self.history + self.horizon:
            raise ConfigError("t_max", f"must exceed history + horizon = {self.history + self.horizon}")
        if self.calibrate not in ("all", "executed"):
            raise ConfigError("calibrate", f"must be 'all' or 'executed', got {self.calibrate!r}")
        if self.predictor is not None and self.predictor.horizon != self.horizon:
            raise ConfigError("predictor", "prediction length differs from horizon")

    @property
    def first_frame(self) -> int:
        return self.scenario.first_frame if self.start_frame is None else self.start_frame


@dataclass
class StepRecord:
    step: int
    frame: int
    state: VehicleState
    applied: ControlInput
    feasible: bool
    plan_cost: float
    realized: ObstacleSet
    min_clearance: float
    plan: tuple | None
    radii: list[RadiusSnapshot] = field(default_factory=list)


@dataclass
class EpisodeLog:
    controller: str
    scenario: str
    seed: int
    r_safe: float
    t_max: int
    n_inputs: int
    records: list[StepRecord] = field(default_factory=list)
    coverage: list[CoverageEvent] = field(default_factory=list)
    tau: int = 0
    arrived: bool = False

    def series_key(self, event: CoverageEvent) -> str | None:
        """Coverage series an event belongs to: per input (ECP) or per horizon (ACP)."""
        if self.controller == "acp":
            return f"h{event.horizon}"
        if event.horizon == 1:
            return f"u{event.prefix[0]}"
        return None

    def running_coverage(self) -> dict[str, list[float]]:
        return running_coverage(self.controller, [(e.horizon, e.prefix, e.covered) for e in self.coverage])

    # -- serialisation -----------------------------------------------------

    def write_steps_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(STEP_COLUMNS)
            for r in self.records:
                w.writerow([
                    r.step, r.frame, repr(r.state.x), repr(r.state.y), repr(r.state.theta),
                    repr(r.applied.v), repr(r.applied.omega), int(r.feasible), repr(r.plan_cost),
                    repr(r.min_clearance), int(r.min_clearance < self.r_safe), len(r.realized),
                    "-".join(map(str, r.plan)) if r.plan else "",
                ])

    def write_radii_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RADII_COLUMNS)
            for r in self.records:
                for snap in r.radii:
                    w.writerow([r.frame, snap.horizon, "-".join(map(str, snap.prefix)), repr(snap.alpha), repr(snap.radius)])

    def write_coverage_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COVERAGE_COLUMNS)
            for e in self.coverage:
                w.writerow([e.frame, e.horizon, "-".join(map(str, e.prefix)), int(e.covered),
                            repr(e.alpha_before), repr(e.alpha_after)])


def running_coverage(controller: str, events) -> dict[str, list[float]]:
    """Running coverage frequency per series from ``(horizon, prefix, covered)`` triples."""
    hits: dict[str, int] = defaultdict(int)
    out: dict[str, list[float]] = defaultdict(list)
    for horizon, prefix, covered in events:
        if controller == "acp":
            key = f"h{horizon}"
        elif horizon == 1:
            key = f"u{prefix[0]}"
        else:
            continue
        hits[key] += int(covered)
        out[key].append(hits[key] / (len(out[key]) + 1))
    return dict(out)


def read_coverage_csv(path) -> list[tuple[int, tuple, bool]]:
    events = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            prefix = tuple(int(p) for p in row["prefix"].split("-")) if row["prefix"] else ()
            events.append((int(row["horizon"]), prefix, row["covered"] == "1"))
    return events


def _history(scenario: ScenarioTimeline, frame: int, length: int) -> History:
    return History(tuple(scenario.at(f) for f in range(frame - length + 1, frame + 1)), frame)


def run_episode(config: EpisodeConfig) -> EpisodeLog:
    """Run one closed-loop episode: warm-up, then observe/calibrate/predict/solve/act."""
    config.validate()
    scen = config.scenario
    H, N = config.history, config.horizon
    h = scen.frame_period
    predictor = config.predictor or ConstantVelocityPredictor(N)
    window = CalibrationWindow(config.window, N)
    if config.controller == "ecp":
        acp = AcpLedger(config.target_alpha, config.gamma, N, config.initial_alpha)
    else:
        acp = ObstacleAcpState(config.target_alpha, config.gamma, N, config.initial_alpha)
    out = EpisodeLog(config.controller, scen.name, config.seed, config.safety.r_safe,
                     config.t_max, len(config.catalog))
    start = config.first_frame

    try:
        # warm-up: observe H + N frames without acting
        for f in range(start, start + H + N):
            window.observe(f, scen.at(f))
            if f - start >= H - 1:
                window.add_sheet(predictor.predict(_history(scen, f, H)))

        state = config.start_state
        for k in range(config.t_max):
            f = start + H + N + k
            realized = scen.at(f)
            window.observe(f, realized)
            out.coverage.extend(acp.record_frame(realized, f))
            if config.goal.reached(state):
                out.arrived = True
                break
            sheet = predictor.predict(_history(scen, f, H))
            window.add_sheet(sheet)
            if config.controller == "ecp":
                result = solve_ecp_mpc(state, sheet, window, acp, config.goal, config.safety, config.catalog,
                                       config.n_epochs, h, frame=f, calibrate=config.calibrate)
            else:
                result = solve_acp_mpc(state, sheet, window, acp, config.goal, config.safety, config.catalog,
                                       config.n_epochs, h, frame=f)
            if result.best is not None:
                u, cost, plan = result.best.first_input, result.best.total_cost, result.best.index.epochs
            else:
                u = config.safety.fallback_input
                cost = fallback_rollout(state, u, N, h, config.goal).total_cost
                plan = None
            out.records.append(StepRecord(
                k, f, state, u, result.best is not None, cost, realized,
                min_distance(state.position, realized), plan, result.radii,
            ))
            state = unicycle_step(state, u, h)
    except ScenarioExhausted as exc:
        out.tau = len(out.records)
        raise EpisodeTruncated(f"scenario {scen.name} exhausted: {exc}", out) from None

    out.tau = len(out.records)
    return out


@dataclass
class MetricsReport:
    travel_time: int
    collision_rate: float
    average_cost: float
    infeasibility_rate: float
    controller: str = ""
    scenario: str = ""
    seed: int = 0
    arrived: bool = False

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def compute_metrics(episode: EpisodeLog, config: EpisodeConfig | None = None) -> MetricsReport:
    """Travel time, collision rate, average open-loop cost and infeasibility rate.

    Collisions are judged against the realized obstacle positions only.  The
    safety margin comes from ``config`` when given, else from the log.
    """
    if not episode.records:
        raise ValueError("cannot compute metrics of an empty episode log")
    r_safe = episode.r_safe if config is None else config.safety.r_safe
    tau = len(episode.records)
    collisions = sum(r.min_clearance < r_safe for r in episode.records)
    infeasible = sum(not r.feasible for r in episode.records)
    cost = math.fsum(r.plan_cost for r in episode.records) / tau
    return MetricsReport(
        travel_time=tau if episode.arrived else episode.t_max,
        collision_rate=collisions / tau,
        average_cost=cost,
        infeasibility_rate=infeasible / tau,
        controller=episode.controller,
        scenario=episode.scenario,
        seed=episode.seed,
        arrived=episode.arrived,
    )


def metrics_from_steps_csv(path, r_safe: float, t_max: int, arrived: bool) -> MetricsReport:
    """Recompute a :class:`MetricsReport` from a written step log."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty step log")
    tau = len(rows)
    return MetricsReport(
        travel_time=tau if arrived else t_max,
        collision_rate=sum(float(r["min_clearance"]) < r_safe for r in rows) / tau,
        average_cost=math.fsum(float(r["plan_cost"]) for r in rows) / tau,
        infeasibility_rate=sum(r["feasible"] == "0" for r in rows) / tau,
    )
