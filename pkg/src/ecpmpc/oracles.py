"""Slow reference implementations used to cross-check the fast paths.

Everything here is written in plain Python loops over scalars so that it
shares as little code as possible with the vectorised planner.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import INF, ControlInput, GoalSpec, ObstacleSet, VehicleState, stage_cost, terminal_cost, unicycle_step


def brute_quantile(scores: Sequence[float], q: float) -> float:
    """Smallest sample ``s`` with ``F(s) >= q``, scanning every candidate."""
    if q > 1:
        return INF
    if q <= 0:
        return -INF
    m = len(scores)
    for s in sorted(set(scores)):
        if sum(1 for x in scores if x <= s) / m >= q:
            return s
    return INF  # unreachable for q <= 1


def brute_radius(scores: Sequence[float], alpha: float) -> float:
    """Radius at miscoverage level ``alpha``; no finite set covers at ``alpha <= 0``."""
    return INF if alpha <= 0 else brute_quantile(scores, 1.0 - alpha)


def _coords(obstacles) -> list[tuple[float, float]]:
    if isinstance(obstacles, ObstacleSet):
        return [xy for _, xy in obstacles]
    return obstacles


def brute_min_distance(point, obstacles) -> float:
    """Distance to the nearest obstacle; accepts an ObstacleSet or ``(x, y)`` tuples."""
    best = INF
    px, py = point
    for ox, oy in _coords(obstacles):
        dx, dy = px - ox, py - oy
        best = min(best, math.sqrt(dx * dx + dy * dy))
    return best


def brute_egocentric_score(point, predicted, realized) -> float:
    d_pred = brute_min_distance(point, predicted)
    d_real = brute_min_distance(point, realized)
    if d_pred == INF and d_real == INF:
        return 0.0
    return max(d_pred - d_real, 0.0)


def brute_obstacle_score(predicted: ObstacleSet, realized: ObstacleSet) -> float:
    pred = predicted.as_dict()
    worst = 0.0
    for oid, (x, y) in realized:
        if oid in pred:
            px, py = pred[oid]
            worst = max(worst, math.sqrt((x - px) ** 2 + (y - py) ** 2))
    return worst


class _Segments:
    """Point sets flattened into one array, each followed by a +inf sentinel."""

    def __init__(self, sets):
        pts, starts = [], []
        for obs in sets:
            starts.append(len(pts))
            pts.extend(_coords(obs))
            pts.append((INF, INF))
        self.points = np.array(pts, dtype=float).reshape(-1, 2)
        self.starts = np.array(starts, dtype=np.intp)

    def nearest(self, x: float, y: float) -> np.ndarray:
        dx = x - self.points[:, 0]
        dy = y - self.points[:, 1]
        with np.errstate(invalid="ignore"):
            d = np.sqrt(dx * dx + dy * dy)
        d[np.isnan(d)] = INF
        return np.minimum.reduceat(d, self.starts)


def _scan_scores(x, y, pred: _Segments, real: _Segments) -> list[float]:
    d_pred = pred.nearest(x, y)
    d_real = real.nearest(x, y)
    out = []
    for a, b in zip(d_pred.tolist(), d_real.tolist()):
        out.append(0.0 if a == INF and b == INF else max(a - b, 0.0))
    return out


@dataclass
class OracleResult:
    plan: tuple[int, ...] | None
    cost: float | None
    feasible: set[tuple[int, ...]]
    costs: dict[tuple[int, ...], float]


def brute_force_solve(
    state: VehicleState,
    predictions,
    pairs_of: Callable[[int], list[tuple[ObstacleSet, ObstacleSet]]],
    alpha_of: Callable[[tuple, int], float],
    goal: GoalSpec,
    r_safe: float,
    bounds: Sequence[float],
    inputs: Sequence[ControlInput],
    n_epochs: int,
    h: float,
    egocentric: bool = True,
) -> OracleResult:
    """Enumerate every plan, filter the infeasible ones, sort by (cost, index).

    ``pairs_of(i)`` yields the (predicted, realized) calibration pairs for
    horizon ``i``; ``alpha_of(prefix, i)`` the miscoverage level (the prefix
    is ignored for the obstacle-centric variant).
    """
    N = predictions.horizon
    ell = N // n_epochs
    xmin, xmax, ymin, ymax = bounds
    obstacle_radius = {}
    calibration = {}
    for i in range(1, N + 1):
        pairs = pairs_of(i)
        calibration[i] = (_Segments([p for p, _ in pairs]), _Segments([r for _, r in pairs]))
    predicted = {i: _coords(predictions.at(i)) for i in range(1, N + 1)}
    radius_at = {}  # plans sharing a prefix revisit the same (horizon, position, alpha)

    def ego_radius(i, x, y, alpha):
        key = (i, x, y, alpha)
        if key not in radius_at:
            radius_at[key] = brute_radius(_scan_scores(x, y, *calibration[i]), alpha)
        return radius_at[key]

    if not egocentric:
        for i in range(1, N + 1):
            scores = [brute_obstacle_score(p, r) for p, r in pairs_of(i)]
            obstacle_radius[i] = brute_radius(scores, alpha_of((), i))

    ranked = []
    feasible = set()
    costs = {}
    for idx, plan in enumerate(itertools.product(range(len(inputs)), repeat=n_epochs)):
        s = state
        total = 0.0
        ok = True
        for i in range(1, N + 1):
            u = inputs[plan[(i - 1) // ell]]
            total = total + stage_cost(s, u, goal)
            s = unicycle_step(s, u, h)
            if not (xmin <= s.x <= xmax and ymin <= s.y <= ymax):
                ok = False
            if egocentric:
                prefix = plan[: math.ceil(i / ell)]
                radius = ego_radius(i, s.x, s.y, alpha_of(prefix, i))
            else:
                radius = obstacle_radius[i]
            if brute_min_distance((s.x, s.y), predicted[i]) < r_safe + max(radius, 0.0):
                ok = False
        total = total + terminal_cost(s, goal)
        costs[plan] = total
        if ok:
            feasible.add(plan)
            ranked.append((total, idx, plan))
    if not ranked:
        return OracleResult(None, None, feasible, costs)
    cost, _, plan = min(ranked)
    return OracleResult(plan, cost, feasible, costs)
