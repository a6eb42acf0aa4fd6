"""Random instance generators and the invariant suites behind ``ecpmpc selftest``.

Each ``check_*`` function draws its own instances from ``rng`` and returns
``(ok, detail)``.  The pytest suite drives the same generators at larger
instance counts.
"""
from __future__ import annotations

import math
import time

import numpy as np

from .conformal import (
    AcpLedger,
    CalibrationWindow,
    ObstacleAcpState,
    WindowRecord,
    egocentric_radius,
    egocentric_score,
    empirical_quantile,
    quantile_radius,
    obstacle_centric_score,
)
from .geometry import GoalSpec, ObstacleSet, VehicleState, hausdorff_distance, min_distance
from .oracles import brute_force_solve, brute_quantile
from .planner import InputCatalog, SafetyConfig, grid_points, grid_safe_set, solve_acp_mpc, solve_ecp_mpc
from .predictor import PredictionSheet

# ---------------------------------------------------------------------------
# generators


def random_set(rng, n, centre=(0.0, 0.0), spread=4.0, prefix="o") -> ObstacleSet:
    pts = np.asarray(centre) + rng.uniform(-spread, spread, size=(n, 2))
    return ObstacleSet([f"{prefix}{k}" for k in range(n)], pts)


def jitter(rng, obstacles: ObstacleSet, scale: float, drop: float = 0.0) -> ObstacleSet:
    """Perturb every point; with ``drop > 0`` also forget some ids."""
    keep = rng.uniform(size=len(obstacles)) >= drop
    pts = obstacles.points + rng.normal(0.0, scale, size=obstacles.points.shape)
    return ObstacleSet([i for i, k in zip(obstacles.ids, keep) if k], pts[keep])


def random_window(rng, horizon=12, capacity=30, max_obstacles=8, noise=0.4, missing=0.1,
                  drop=0.1) -> CalibrationWindow:
    window = CalibrationWindow(capacity, horizon)
    for frame in range(capacity):
        realized = random_set(rng, int(rng.integers(0, max_obstacles + 1)))
        predicted = []
        for _ in range(horizon):
            if rng.uniform() < missing:
                predicted.append(None)
            else:
                predicted.append(jitter(rng, realized, noise * rng.uniform(0.2, 2.0), drop=drop))
        window.add_record(WindowRecord(frame, realized, tuple(predicted)))
    return window


def random_alpha(rng) -> float:
    # mostly near the target, occasionally past the 0 and 1 sentinels
    u = rng.uniform()
    if u < 0.05:
        return -0.05
    if u < 0.1:
        return 1.02
    return float(rng.uniform(0.0, 0.3))


def random_ledger(rng, horizon=12, n_inputs=9, n_epochs=3, entries=60) -> AcpLedger:
    ledger = AcpLedger(0.1, 0.03, horizon)
    ell = horizon // n_epochs
    for _ in range(entries):
        i = int(rng.integers(1, horizon + 1))
        prefix = tuple(int(p) for p in rng.integers(0, n_inputs, size=-(-i // ell)))
        ledger.alphas[(prefix, i)] = random_alpha(rng)
    return ledger


def random_obstacle_state(rng, horizon=12) -> ObstacleAcpState:
    state = ObstacleAcpState(0.1, 0.03, horizon)
    for i in range(1, horizon + 1):
        if rng.uniform() < 0.5:
            state.alphas[i] = random_alpha(rng)
    return state


def random_sheet(rng, horizon=12, n=None, frame=100) -> PredictionSheet:
    n = int(rng.integers(0, 7)) if n is None else n
    base = random_set(rng, n, spread=3.5)
    vel = rng.normal(0.0, 0.3, size=(n, 2))
    return PredictionSheet([ObstacleSet(base.ids, base.points + i * vel) for i in range(1, horizon + 1)], frame)


def random_problem(rng):
    state = VehicleState(*rng.uniform(-1, 1, size=2), rng.uniform(-math.pi, math.pi))
    goal = GoalSpec(*rng.uniform(-5, 5, size=2))
    bounds = (-4.0, 4.0, -4.0, 4.0) if rng.uniform() < 0.5 else SafetyConfig().state_bounds
    safety = SafetyConfig(r_safe=float(rng.uniform(0.2, 0.6)), state_bounds=bounds)
    return state, goal, safety, InputCatalog.grid()


def random_matched_pair(rng, max_n=20, box=10.0) -> tuple[ObstacleSet, ObstacleSet]:
    """Predicted and realized sets over the same ids (no churn)."""
    n = int(rng.integers(1, max_n + 1))
    ids = [f"p{k}" for k in range(n)]
    pred = rng.uniform(-box, box, size=(n, 2))
    scale = rng.choice([0.01, 0.3, 2.0, 8.0])
    real = np.clip(pred + rng.normal(0.0, scale, size=(n, 2)), -box, box)
    return ObstacleSet(ids, pred), ObstacleSet(ids, real)


def random_multiset(rng) -> tuple[list[float], float]:
    m = int(rng.integers(1, 40))
    kind = rng.integers(3)
    if kind == 0:
        scores = rng.uniform(0, 5, size=m)
    elif kind == 1:
        scores = rng.integers(0, 4, size=m).astype(float)  # heavy ties
    else:
        scores = np.round(rng.exponential(1.0, size=m), 2)
    u = rng.uniform()
    if u < 0.1:
        q = float(rng.uniform(-0.5, 0.0))
    elif u < 0.2:
        q = float(rng.uniform(1.0, 1.5)) if rng.uniform() < 0.5 else 1.0 + 1e-12
    elif u < 0.35:
        q = int(rng.integers(0, m + 1)) / m  # exactly on a step of F
    else:
        q = float(rng.uniform(0, 1))
    return scores.tolist(), q


# ---------------------------------------------------------------------------
# invariant suites


def check_score_dominance(rng, n=1000, tol=1e-9):
    worst = -math.inf
    for _ in range(n):
        pred, real = random_matched_pair(rng)
        x = rng.uniform(-10, 10, size=2)
        ego = egocentric_score(x, pred, real)
        haus = hausdorff_distance(pred, real)
        obs = obstacle_centric_score(pred, real)
        worst = max(worst, ego - haus, haus - obs)
    return worst <= tol, f"{n} instances, max violation {worst:.3g}"


def check_quantile_oracle(rng, n=10_000):
    bad = 0
    for _ in range(n):
        scores, q = random_multiset(rng)
        bad += empirical_quantile(scores, q) != brute_quantile(scores, q)
    return bad == 0, f"{n} multisets, {bad} mismatches"


def adversarial_alpha_run(steps, horizons=(1, 2, 6, 12), gamma=0.03, target=0.1, phase=500, seed=0):
    """Drive an egocentric ledger with an adversary that controls every outcome.

    Each horizon owns one plan prefix whose candidate sits 1 km from the
    others.  The radius comes from a fixed score multiset at the current
    level, so it is ``+inf`` for levels at or below 0 and ``-inf`` at or above
    1; in between the adversary picks coverage or miscoverage to push the
    level toward one end, switching ends every ``phase`` steps (with random
    flips when ``seed`` is set).  Returns the extreme level relative to its
    allowed band for every horizon.
    """
    rng = np.random.default_rng(seed)
    N = max(horizons)
    ledger = AcpLedger(target, gamma, N)
    scores = np.arange(30, dtype=float)
    keys = {i: ((0,) * i, (1000.0 * k, 0.0)) for k, i in enumerate(horizons)}
    predicted_distance = 100.0  # beyond every finite radius
    wanted: dict[int, dict[int, bool]] = {}
    extremes = {i: [math.inf, -math.inf] for i in horizons}
    for t in range(steps):
        push_up = (t // phase) % 2 == 0
        if seed and rng.uniform() < 0.05:
            push_up = not push_up
        # realize the frame: park an obstacle on every candidate that should miss
        misses = [keys[i][1] for i, miss in wanted.pop(t, {}).items() if miss]
        realized = ObstacleSet([f"m{k}" for k in range(len(misses))], misses) if misses else ObstacleSet.empty()
        for ev in ledger.record_frame(realized, t):
            lo, hi = extremes[ev.horizon]
            extremes[ev.horizon] = [min(lo, ev.alpha_after), max(hi, ev.alpha_after)]
        for i in horizons:
            prefix, cand = keys[i]
            radius = quantile_radius(scores, ledger.alpha(prefix, i))
            ledger.stage_pending(prefix, i, cand, predicted_distance, radius, t)
            wanted.setdefault(t + i, {})[i] = not push_up
    return {i: (lo, hi, -(i + 1) * gamma, 1 + (i + 1) * gamma) for i, (lo, hi) in extremes.items()}


def check_alpha_bounds(steps=100_000, gamma=0.03, seed=0):
    report = adversarial_alpha_run(steps, gamma=gamma, seed=seed)
    ok = all(lo >= blo and hi <= bhi for lo, hi, blo, bhi in report.values())
    detail = ", ".join(f"h{i}: [{lo:.3f}, {hi:.3f}]" for i, (lo, hi, _, _) in sorted(report.items()))
    return ok, f"{steps} steps, {detail}"


def solver_instance(rng, drop=0.1):
    state, goal, safety, catalog = random_problem(rng)
    window = random_window(rng, drop=drop)
    sheet = random_sheet(rng)
    return state, goal, safety, catalog, window, sheet


def check_solver_oracle(rng, n=100):
    bad = 0
    for _ in range(n):
        state, goal, safety, catalog, window, sheet = solver_instance(rng)
        ledger = random_ledger(rng)
        obs_state = random_obstacle_state(rng)
        inputs = list(catalog.inputs)
        res = solve_ecp_mpc(state, sheet, window, ledger, goal, safety, catalog)
        ref = brute_force_solve(state, sheet, window.pairs, ledger.alpha, goal, safety.r_safe,
                                safety.state_bounds, inputs, 3, 0.4)
        got = res.best.index.epochs if res.best else None
        bad += got != ref.plan or res.feasible_plans() != ref.feasible
        res = solve_acp_mpc(state, sheet, window, obs_state, goal, safety, catalog)
        ref = brute_force_solve(state, sheet, window.pairs, lambda p, i: obs_state.alpha(i), goal,
                                safety.r_safe, safety.state_bounds, inputs, 3, 0.4, egocentric=False)
        got = res.best.index.epochs if res.best else None
        bad += got != ref.plan or res.feasible_plans() != ref.feasible
    return bad == 0, f"{n} instances x 2 controllers, {bad} mismatches"


def cost_ordering_instance(rng):
    """One solve of each controller on cloned windows with one shared level."""
    state, goal, safety, catalog, window, sheet = solver_instance(rng, drop=0.0)
    alpha = float(rng.uniform(0.0, 0.5))
    ledger = AcpLedger(0.1, 0.03, 12, initial_alpha=alpha)
    obs_state = ObstacleAcpState(0.1, 0.03, 12, initial_alpha=alpha)
    ego = solve_ecp_mpc(state, sheet, window.copy(), ledger, goal, safety, catalog)
    obs = solve_acp_mpc(state, sheet, window.copy(), obs_state, goal, safety, catalog)
    return ego, obs


def check_cost_ordering(rng, n=200):
    bad = 0
    for _ in range(n):
        ego, obs = cost_ordering_instance(rng)
        j_ego = ego.best.total_cost if ego.best else math.inf
        j_obs = obs.best.total_cost if obs.best else math.inf
        bad += not (j_ego <= j_obs and obs.feasible_plans() <= ego.feasible_plans())
    return bad == 0, f"{n} instances, {bad} violations"


def grid_soundness_samples(rng, n=1000, delta=0.25):
    """Sample points inside admitted balls; return (point, clearance, margin of its cell)."""
    window = random_window(rng)
    sheet = random_sheet(rng, n=6)
    horizon = int(rng.integers(1, 13))
    bounds = (-5.0, 5.0, -5.0, 5.0)
    points = grid_points(bounds, delta)
    alpha = 0.1
    radii = np.array([egocentric_radius(p, horizon, window, alpha) for p in points])
    r_safe = 0.3
    admitted = grid_safe_set(points, delta, sheet.at(horizon), radii, r_safe)
    out = []
    for _ in range(n):
        k = admitted[int(rng.integers(len(admitted)))]
        r = delta * math.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * math.pi)
        x = points[k] + r * np.array([math.cos(a), math.sin(a)])
        margin = r_safe + max(radii[k], 0.0)
        out.append((x, min_distance(x, sheet.at(horizon)), margin))
    return out


def check_grid_soundness(rng, n=1000):
    samples = grid_soundness_samples(rng, n)
    bad = sum(d < margin for _, d, margin in samples)
    return bool(bad == 0), f"{n} samples, {bad} outside the unpadded safe set"


def run_all(seed=0, quick=True):
    """Yield ``(name, ok, detail)`` for every suite."""
    sizes = dict(dominance=200, quantile=2000, alpha=10_000, solver=5, ordering=40, grid=200)
    if not quick:
        sizes = dict(dominance=1000, quantile=10_000, alpha=100_000, solver=100, ordering=200, grid=1000)
    rng = np.random.default_rng(seed)
    suites = [
        ("score dominance", lambda: check_score_dominance(rng, sizes["dominance"])),
        ("quantile oracle", lambda: check_quantile_oracle(rng, sizes["quantile"])),
        ("alpha bounds", lambda: check_alpha_bounds(sizes["alpha"], seed=seed)),
        ("solver oracle", lambda: check_solver_oracle(rng, sizes["solver"])),
        ("cost ordering", lambda: check_cost_ordering(rng, sizes["ordering"])),
        ("grid soundness", lambda: check_grid_soundness(rng, sizes["grid"])),
    ]
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        yield name, ok, f"{detail} ({time.perf_counter() - t0:.1f}s)"
