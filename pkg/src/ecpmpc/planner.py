"""Discrete-input MPC over decision epochs: ECP-MPC, ACP-MPC and a grid safe set.

Plans are multi-indices over ``D`` decision epochs, each epoch holding one
catalog input for ``N / D`` steps.  Plans are enumerated in lexicographic
order (index ``0`` first), which doubles as the tie-break among equal costs.
Catalog indices are 0-based.

All per-plan work (rollout, radii, feasibility, cost) is done on whole arrays
of plans at once; radii are computed once per distinct plan prefix and then
broadcast, so plans sharing a prefix get bitwise-identical radii.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conformal import (
    AcpLedger,
    CalibrationWindow,
    ObstacleAcpState,
    egocentric_radii,
    obstacle_centric_radius,
)
from .geometry import ControlInput, GoalSpec, ObstacleSet, VehicleState, min_distances, wrap_angles
from .predictor import PredictionSheet

DEFAULT_SPEEDS = (-0.8, 0.0, 0.8)
DEFAULT_TURN_RATES = (-0.7, 0.0, 0.7)


@dataclass(frozen=True)
class InputCatalog:
    inputs: tuple[ControlInput, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if not self.inputs:
            raise ValueError("input catalog must not be empty")
        if len(set(self.inputs)) != len(self.inputs):
            raise ValueError("input catalog contains duplicates")

    @classmethod
    def grid(cls, speeds=DEFAULT_SPEEDS, turn_rates=DEFAULT_TURN_RATES) -> "InputCatalog":
        return cls(tuple(ControlInput(v, w) for v in speeds for w in turn_rates))

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, k: int) -> ControlInput:
        return self.inputs[k]

    def as_array(self) -> np.ndarray:
        return np.array([[u.v, u.omega] for u in self.inputs])


@dataclass(frozen=True)
class PlanIndex:
    epochs: tuple[int, ...]
    epoch_length: int

    def prefix(self, horizon: int) -> tuple[int, ...]:
        """Epoch choices that determine the planned state at ``horizon``."""
        return self.epochs[: prefix_length(horizon, self.epoch_length)]

    def expand(self) -> list[int]:
        return [e for e in self.epochs for _ in range(self.epoch_length)]


def prefix_length(horizon: int, epoch_length: int) -> int:
    return -(-horizon // epoch_length)


@dataclass(frozen=True)
class SafetyConfig:
    r_safe: float = 0.3
    state_bounds: tuple[float, float, float, float] = (-math.inf, math.inf, -math.inf, math.inf)
    target_alpha: float = 0.1
    fallback_input: ControlInput = ControlInput(0.0, 0.0)

    def __post_init__(self):
        if not self.r_safe > 0:
            raise ValueError("r_safe must be positive")
        xmin, xmax, ymin, ymax = self.state_bounds
        if not (xmin < xmax and ymin < ymax):
            raise ValueError(f"empty state bounds {self.state_bounds}")

    def in_bounds(self, xy: np.ndarray) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.state_bounds
        x, y = xy[..., 0], xy[..., 1]
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)


@dataclass
class PlanRollout:
    index: PlanIndex
    states: np.ndarray  # (N + 1, 3) rows of x, y, theta
    inputs: np.ndarray  # (N, 2) rows of v, omega
    total_cost: float | None = None
    feasible: bool | None = None
    first_violation: tuple[int, str] | None = None

    def vehicle_states(self) -> list[VehicleState]:
        return [VehicleState(*row) for row in self.states]

    def control_inputs(self) -> list[ControlInput]:
        return [ControlInput(*row) for row in self.inputs]

    @property
    def first_input(self) -> ControlInput:
        return ControlInput(*self.inputs[0])


# ---------------------------------------------------------------------------
# enumeration


@dataclass
class RolloutBatch:
    """Every plan of ``Phi`` rolled out at once, plans in lexicographic order."""

    plans: np.ndarray  # (P, D) catalog indices
    states: np.ndarray  # (P, N + 1, 3)
    inputs: np.ndarray  # (P, N, 2)
    n_inputs: int
    epoch_length: int

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_epochs(self) -> int:
        return self.plans.shape[1]

    def prefix_block(self, horizon: int) -> int:
        """Number of consecutive plans sharing each prefix relevant at ``horizon``."""
        return self.n_inputs ** (self.n_epochs - prefix_length(horizon, self.epoch_length))

    def prefix_states(self, horizon: int) -> np.ndarray:
        """Planned positions at ``horizon``, one row per distinct prefix."""
        return self.states[:: self.prefix_block(horizon), horizon, :2]

    def prefix_tuples(self, horizon: int) -> list[tuple[int, ...]]:
        return _prefixes(self.n_inputs, prefix_length(horizon, self.epoch_length))

    def rollout(self, k: int) -> PlanRollout:
        return PlanRollout(
            PlanIndex(tuple(int(v) for v in self.plans[k]), self.epoch_length),
            self.states[k].copy(),
            self.inputs[k].copy(),
        )

    def costs(self, goal: GoalSpec) -> np.ndarray:
        return plan_costs(self.states, self.inputs, goal)


@functools.lru_cache(maxsize=None)
def _plan_table(n_u: int, n_epochs: int) -> np.ndarray:
    plans = np.array(list(itertools.product(range(n_u), repeat=n_epochs)), dtype=np.int64)
    plans = plans.reshape(n_u**n_epochs, n_epochs)
    plans.setflags(write=False)
    return plans


@functools.lru_cache(maxsize=None)
def _prefixes(n_u: int, length: int) -> list[tuple[int, ...]]:
    return list(itertools.product(range(n_u), repeat=length))


def _step(states: np.ndarray, inputs: np.ndarray, h: float) -> np.ndarray:
    x, y, th = states[:, 0], states[:, 1], states[:, 2]
    hv = h * inputs[:, 0]
    return np.stack(
        [x + hv * np.cos(th), y + hv * np.sin(th), wrap_angles(th + h * inputs[:, 1])], axis=1
    )


def rollout_batch(state: VehicleState, catalog: InputCatalog, n_epochs: int, horizon: int, h: float) -> RolloutBatch:
    if n_epochs < 1 or horizon % n_epochs:
        raise ValueError(f"number of epochs {n_epochs} must divide the horizon {horizon}")
    ell = horizon // n_epochs
    n_u = len(catalog)
    table = catalog.as_array()
    n_plans = n_u**n_epochs

    plans = _plan_table(n_u, n_epochs)
    states = np.empty((n_plans, horizon + 1, 3))
    states[:, 0] = state.as_array()
    inputs = np.repeat(table[plans], ell, axis=1)

    # grow the prefix tree one epoch at a time; n_u**e distinct prefixes at epoch e
    current = state.as_array()[None, :]
    for e in range(n_epochs):
        current = np.repeat(current, n_u, axis=0)
        u = np.tile(table, (n_u**e, 1))
        block = n_u ** (n_epochs - e - 1)
        for s in range(ell):
            current = _step(current, u, h)
            states[:, 1 + e * ell + s] = np.repeat(current, block, axis=0)
    return RolloutBatch(plans, states, inputs, n_u, ell)


def enumerate_rollouts(state: VehicleState, catalog: InputCatalog, n_epochs: int, horizon: int, h: float) -> list[PlanRollout]:
    batch = rollout_batch(state, catalog, n_epochs, horizon, h)
    return [batch.rollout(k) for k in range(len(batch.plans))]


def plan_costs(states: np.ndarray, inputs: np.ndarray, goal: GoalSpec) -> np.ndarray:
    """Open-loop objective: stage costs over steps 0..N-1 plus the terminal cost."""
    dx = states[..., 0] - goal.goal_x
    dy = states[..., 1] - goal.goal_y
    sq = dx * dx + dy * dy
    energy = goal.input_cost_weight * (inputs[..., 0] * inputs[..., 0] + inputs[..., 1] * inputs[..., 1])
    horizon = inputs.shape[-2]
    total = np.zeros(states.shape[:-2])
    for i in range(horizon):
        total = total + (sq[..., i] + energy[..., i])
    return total + goal.terminal_weight * sq[..., horizon]


def fallback_rollout(state: VehicleState, u: ControlInput, horizon: int, h: float, goal: GoalSpec) -> PlanRollout:
    states = np.empty((horizon + 1, 3))
    states[0] = state.as_array()
    inputs = np.tile(u.as_array(), (horizon, 1))
    for i in range(horizon):
        states[i + 1] = _step(states[i : i + 1], inputs[i : i + 1], h)[0]
    cost = float(plan_costs(states, inputs, goal))
    return PlanRollout(PlanIndex((), horizon), states, inputs, cost, False, None)


# ---------------------------------------------------------------------------
# solving


@dataclass(frozen=True)
class RadiusSnapshot:
    horizon: int
    prefix: tuple
    alpha: float
    radius: float


@dataclass
class SolveResult:
    """Outcome of one MPC solve.

    Unpacks as ``best, staged`` for callers that only need the plan and the
    coverage checks it scheduled.
    """

    best: PlanRollout | None
    staged: list
    batch: RolloutBatch
    costs: np.ndarray
    feasible: np.ndarray
    safe_ok: np.ndarray  # (P, N) safety constraint per horizon
    bounds_ok: np.ndarray  # (P, N)
    radii: list[RadiusSnapshot] = field(default_factory=list)

    def __iter__(self):
        yield self.best
        yield self.staged

    def rollout(self, k: int) -> PlanRollout:
        r = self.batch.rollout(k)
        r.total_cost = float(self.costs[k])
        r.feasible = bool(self.feasible[k])
        for i in range(self.safe_ok.shape[1]):
            if not self.bounds_ok[k, i]:
                r.first_violation = (i + 1, "bounds")
                break
            if not self.safe_ok[k, i]:
                r.first_violation = (i + 1, "safety")
                break
        return r

    def feasible_plans(self) -> set[tuple[int, ...]]:
        return {tuple(int(v) for v in self.batch.plans[k]) for k in np.flatnonzero(self.feasible)}


def _margin(r_safe: float, radius):
    # -inf radius (empty confidence set) never relaxes the bare safety margin
    return r_safe + np.maximum(radius, 0.0)


def _select(costs: np.ndarray, feasible: np.ndarray) -> int | None:
    if not feasible.any():
        return None
    masked = np.where(feasible, costs, np.inf)
    return int(np.argmin(masked))  # first minimum == lowest lexicographic index


def solve_ecp_mpc(
    state: VehicleState,
    predictions: PredictionSheet,
    window: CalibrationWindow,
    ledger: AcpLedger,
    goal: GoalSpec,
    safety: SafetyConfig,
    catalog: InputCatalog,
    n_epochs: int = 3,
    h: float = 0.4,
    frame: int | None = None,
    calibrate: str = "all",
) -> SolveResult:
    """Egocentric CP-MPC.

    Every distinct plan prefix at horizon ``i`` gets its own radius from the
    egocentric scores of its planned position.  When ``frame`` is given,
    coverage checks are staged on ``ledger``: with ``calibrate="all"`` one
    per distinct prefix and horizon, with ``"executed"`` only the horizon-1
    check of every catalog input and the chosen plan's deeper checks.  Either
    way only those latter outcomes are reported as coverage events.
    """
    if calibrate not in ("all", "executed"):
        raise ValueError(f"calibrate must be 'all' or 'executed', got {calibrate!r}")
    N = predictions.horizon
    batch = rollout_batch(state, catalog, n_epochs, N, h)
    n_plans = len(batch.plans)
    safe_ok = np.empty((n_plans, N), dtype=bool)
    per_horizon = []
    for i in range(1, N + 1):
        cand = batch.prefix_states(i)
        prefixes = batch.prefix_tuples(i)
        alphas = np.array([ledger.alpha(p, i) for p in prefixes])
        radii = egocentric_radii(cand, window, i, alphas)
        d_pred = min_distances(cand, predictions.at(i))
        ok = d_pred >= _margin(safety.r_safe, radii)
        safe_ok[:, i - 1] = np.repeat(ok, batch.prefix_block(i))
        per_horizon.append((prefixes, cand, alphas, radii, d_pred))

    bounds_ok = safety.in_bounds(batch.states[:, 1:, :2])
    feasible = safe_ok.all(axis=1) & bounds_ok.all(axis=1)
    costs = batch.costs(goal)
    k = _select(costs, feasible)
    result = SolveResult(None, [], batch, costs, feasible, safe_ok, bounds_ok)
    if k is not None:
        result.best = result.rollout(k)

    for i, (prefixes, cand, alphas, radii, d_pred) in enumerate(per_horizon, 1):
        rows = []
        if i == 1:
            rows = list(range(len(prefixes)))
        elif k is not None:
            rows = [int(k // batch.prefix_block(i))]
        for r in rows:
            result.radii.append(RadiusSnapshot(i, prefixes[r], float(alphas[r]), float(radii[r])))
        if frame is None:
            continue
        if calibrate == "all":
            reported = np.zeros(len(prefixes), dtype=bool)
            reported[rows] = True
            result.staged.append(ledger.stage_batch(prefixes, i, cand, d_pred, radii, frame, reported))
        else:
            for r in rows:
                result.staged.append(ledger.stage_pending(prefixes[r], i, cand[r], d_pred[r], radii[r], frame))
    return result


def solve_acp_mpc(
    state: VehicleState,
    predictions: PredictionSheet,
    window: CalibrationWindow,
    obstacle_state: ObstacleAcpState,
    goal: GoalSpec,
    safety: SafetyConfig,
    catalog: InputCatalog,
    n_epochs: int = 3,
    h: float = 0.4,
    frame: int | None = None,
) -> SolveResult:
    """Obstacle-centric ACP-MPC: one radius per horizon shared by every plan."""
    N = predictions.horizon
    batch = rollout_batch(state, catalog, n_epochs, N, h)
    n_plans = len(batch.plans)
    safe_ok = np.empty((n_plans, N), dtype=bool)
    snapshots = []
    for i in range(1, N + 1):
        alpha = obstacle_state.alpha(i)
        radius = obstacle_centric_radius(i, window, alpha)
        cand = batch.prefix_states(i)
        ok = min_distances(cand, predictions.at(i)) >= _margin(safety.r_safe, radius)
        safe_ok[:, i - 1] = np.repeat(ok, batch.prefix_block(i))
        snapshots.append(RadiusSnapshot(i, (), alpha, radius))

    bounds_ok = safety.in_bounds(batch.states[:, 1:, :2])
    feasible = safe_ok.all(axis=1) & bounds_ok.all(axis=1)
    costs = batch.costs(goal)
    k = _select(costs, feasible)
    result = SolveResult(None, [], batch, costs, feasible, safe_ok, bounds_ok, snapshots)
    if k is not None:
        result.best = result.rollout(k)
    if frame is not None:
        for snap in snapshots:
            result.staged.append(
                obstacle_state.stage_pending(snap.horizon, predictions.at(snap.horizon), snap.radius, frame)
            )
    return result


# ---------------------------------------------------------------------------
# state-space discretisation


def grid_points(bounds: Sequence[float], delta: float) -> np.ndarray:
    """Cell centres of a square grid whose ``delta``-balls cover ``bounds``."""
    if not delta > 0:
        raise ValueError("grid resolution must be positive")
    xmin, xmax, ymin, ymax = bounds
    spacing = delta * math.sqrt(2.0)
    nx = max(1, math.ceil((xmax - xmin) / spacing))
    ny = max(1, math.ceil((ymax - ymin) / spacing))
    xs = xmin + spacing * (np.arange(nx) + 0.5)
    ys = ymin + spacing * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def grid_safe_set(points: np.ndarray, delta: float, predicted: ObstacleSet, radii, r_safe: float) -> np.ndarray:
    """Indices of grid points whose ``delta``-ball lies in the egocentric safe set.

    A point is admitted when its clearance to the predicted obstacles exceeds
    ``r_safe + radius + delta``; by the triangle inequality every position
    within ``delta`` of it then clears ``r_safe + radius``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(pts),))
    clearance = min_distances(pts, predicted)
    return np.flatnonzero(clearance >= _margin(r_safe, radii) + delta)


def grid_radii(points: np.ndarray, horizon: int, window: CalibrationWindow, alphas) -> np.ndarray:
    """Egocentric radius of each grid point from its own miscoverage level."""
    return egocentric_radii(np.asarray(points, dtype=float).reshape(-1, 2), window, horizon, alphas)
