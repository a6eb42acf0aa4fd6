"""Geometric primitives, unicycle kinematics and navigation costs.

Extended reals are plain floats: ``math.inf`` / ``-math.inf`` are exact IEEE
sentinels, so comparisons against them are never approximate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

INF = math.inf


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]; in-range angles are returned untouched."""
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`, bitwise identical to the scalar version."""
    theta = np.array(theta, dtype=float)
    out = (theta <= -math.pi) | (theta > math.pi)
    if out.any():
        theta[out] = [wrap_angle(float(v)) for v in theta[out]]
    return theta


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite vehicle position ({self.x}, {self.y})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.omega)):
            raise ValueError(f"non-finite control input ({self.v}, {self.omega})")
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "omega", float(self.omega))

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


class ObstacleSet:
    """Labelled 2D obstacle positions observed (or predicted) at one timestep.

    Positions are kept as an ``(n, 2)`` float array aligned with ``ids`` so the
    planner can broadcast distance computations without repacking.
    """

    __slots__ = ("ids", "points", "_index")

    def __init__(self, ids: Sequence[str] = (), points=None):
        ids = tuple(str(i) for i in ids)
        if points is None:
            points = np.empty((0, 2))
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(ids) != len(pts):
            raise ValueError(f"{len(ids)} ids but {len(pts)} positions")
        index = {oid: k for k, oid in enumerate(ids)}
        if len(index) != len(ids):
            raise ValueError("obstacle ids must be unique within a set")
        pts.setflags(write=False)
        self.ids = ids
        self.points = pts
        self._index = index

    @classmethod
    def from_mapping(cls, positions: Mapping[str, Iterable[float]]) -> "ObstacleSet":
        ids = list(positions)
        return cls(ids, [tuple(positions[i]) for i in ids])

    @classmethod
    def empty(cls) -> "ObstacleSet":
        return cls()

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, obstacle_id) -> bool:
        return str(obstacle_id) in self._index

    def __iter__(self):
        for oid, p in zip(self.ids, self.points):
            yield oid, (float(p[0]), float(p[1]))

    def position(self, obstacle_id) -> np.ndarray:
        return self.points[self._index[str(obstacle_id)]]

    def as_dict(self) -> dict[str, tuple[float, float]]:
        return dict(iter(self))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObstacleSet):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self) -> str:
        inner = ", ".join(f"{oid}:({p[0]:.3f},{p[1]:.3f})" for oid, p in self)
        return f"ObstacleSet({{{inner}}})"


@dataclass(frozen=True)
class GoalSpec:
    goal_x: float
    goal_y: float
    arrival_radius: float = 0.5
    input_cost_weight: float = 1e-3
    terminal_weight: float = 10.0

    def __post_init__(self):
        if not self.arrival_radius > 0:
            raise ValueError("arrival_radius must be positive")
        if self.input_cost_weight < 0 or self.terminal_weight < 0:
            raise ValueError("cost weights must be nonnegative")

    def reached(self, state: VehicleState) -> bool:
        return math.hypot(state.x - self.goal_x, state.y - self.goal_y) <= self.arrival_radius


def _as_points(obstacles) -> np.ndarray:
    if isinstance(obstacles, ObstacleSet):
        return obstacles.points
    return np.asarray(obstacles, dtype=float).reshape(-1, 2)


def min_distance(point, obstacles) -> float:
    """Distance from ``point`` to the closest obstacle; ``inf`` for an empty set."""
    pts = _as_points(obstacles)
    if len(pts) == 0:
        return INF
    p = np.asarray(point, dtype=float)
    dx = p[0] - pts[:, 0]
    dy = p[1] - pts[:, 1]
    return float(np.sqrt((dx * dx + dy * dy).min()))


def min_distances(points: np.ndarray, obstacles) -> np.ndarray:
    """Row-wise :func:`min_distance` for an ``(..., 2)`` array of query points."""
    pts = _as_points(obstacles)
    q = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return np.full(q.shape[:-1], INF)
    dx = q[..., 0, None] - pts[:, 0]
    dy = q[..., 1, None] - pts[:, 1]
    return np.sqrt((dx * dx + dy * dy).min(axis=-1))


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # sup over a of the distance to b
    return float(min_distances(a, b).max())


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance (max of the two directed distances)."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return INF
    return max(_directed(pa, pb), _directed(pb, pa))


def unicycle_step(state: VehicleState, u: ControlInput, h: float) -> VehicleState:
    if not h > 0:
        raise ValueError("time step h must be positive")
    return VehicleState(
        state.x + h * u.v * math.cos(state.theta),
        state.y + h * u.v * math.sin(state.theta),
        state.theta + h * u.omega,
    )


def stage_cost(state: VehicleState, u: ControlInput, goal: GoalSpec) -> float:
    dx = state.x - goal.goal_x
    dy = state.y - goal.goal_y
    return dx * dx + dy * dy + goal.input_cost_weight * (u.v * u.v + u.omega * u.omega)


def terminal_cost(state: VehicleState, goal: GoalSpec) -> float:
    dx = state.x - goal.goal_x
    dy = state.y - goal.goal_y
    return goal.terminal_weight * (dx * dx + dy * dy)
