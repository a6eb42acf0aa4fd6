import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecpmpc.geometry import (
    INF,
    ControlInput,
    GoalSpec,
    ObstacleSet,
    VehicleState,
    hausdorff_distance,
    min_distance,
    min_distances,
    stage_cost,
    terminal_cost,
    unicycle_step,
    wrap_angle,
    wrap_angles,
)

coords = st.floats(-50, 50, allow_nan=False)
point_lists = st.lists(st.tuples(coords, coords), min_size=1, max_size=12)


def pts(*xy):
    return ObstacleSet([str(k) for k in range(len(xy))], xy)


@pytest.mark.parametrize(
    "point, obstacles, expected",
    [((0, 0), pts((3, 4)), 5.0), ((0, 0), ObstacleSet.empty(), INF), ((0, 0), pts((1, 0), (0, 2)), 1.0)],
)
def test_min_distance_examples(point, obstacles, expected):
    assert min_distance(point, obstacles) == expected


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (pts((0, 0)), pts((0, 0)), 0.0),
        (pts((0, 0)), pts((1, 0)), 1.0),
        (pts((0, 0), (2, 0)), pts((0, 0)), 2.0),
        (ObstacleSet.empty(), ObstacleSet.empty(), 0.0),
        (ObstacleSet.empty(), pts((1, 1)), INF),
    ],
)
def test_hausdorff_examples(a, b, expected):
    assert hausdorff_distance(a, b) == expected
    assert hausdorff_distance(b, a) == expected


@given(point_lists, point_lists, point_lists)
def test_hausdorff_is_a_metric_on_finite_sets(a, b, c):
    A, B, C = (np.array(s) for s in (a, b, c))
    assert hausdorff_distance(A, B) == hausdorff_distance(B, A)
    assert hausdorff_distance(A, C) <= hausdorff_distance(A, B) + hausdorff_distance(B, C) + 1e-9


@given(st.tuples(coords, coords), point_lists)
def test_min_distances_matches_scalar(p, obs):
    o = np.array(obs)
    assert min_distances(np.array([p]), o)[0] == min_distance(p, o)


@pytest.mark.parametrize(
    "state, u, expected",
    [
        ((0, 0, 0), (1, 0), (0.4, 0, 0)),
        ((0, 0, 0), (0, 0.7), (0, 0, 0.28)),
        ((1, 1, math.pi / 2), (0.8, 0), (1, 1.32, math.pi / 2)),
    ],
)
def test_unicycle_examples(state, u, expected):
    nxt = unicycle_step(VehicleState(*state), ControlInput(*u), 0.4)
    assert (nxt.x, nxt.y, nxt.theta) == pytest.approx(expected, abs=1e-12)


def test_unicycle_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        unicycle_step(VehicleState(0, 0), ControlInput(1, 0), 0.0)


def test_heading_is_wrapped():
    s = VehicleState(0, 0, math.pi)
    nxt = unicycle_step(s, ControlInput(0, 0.7), 0.4)
    assert -math.pi < nxt.theta <= math.pi
    assert nxt.theta == pytest.approx(math.pi + 0.28 - 2 * math.pi)


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range_and_vector_agreement(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)
    assert wrap_angles(np.array([theta]))[0] == w


def test_stage_cost_examples():
    free = GoalSpec(0, 0, input_cost_weight=0.0)
    assert stage_cost(VehicleState(0, 0), ControlInput(0.8, 0.7), free) == 0.0
    goal = GoalSpec(0, 0)
    assert stage_cost(VehicleState(1, 2), ControlInput(0.8, 0.7), goal) == pytest.approx(5.00113, abs=1e-12)
    assert stage_cost(VehicleState(3, 4), ControlInput(0, 0), goal) == 25.0


def test_terminal_cost_examples():
    goal = GoalSpec(0, 0)
    assert terminal_cost(VehicleState(0, 0), goal) == 0.0
    assert terminal_cost(VehicleState(1, 0), goal) == 10.0
    assert terminal_cost(VehicleState(1, 2), goal) == 50.0


def test_obstacle_set_basics():
    s = ObstacleSet.from_mapping({"b": (1, 2), "a": (3, 4)})
    assert len(s) == 2 and "a" in s and "c" not in s
    assert tuple(s.position("a")) == (3.0, 4.0)
    assert s == ObstacleSet(["a", "b"], [(3, 4), (1, 2)])
    with pytest.raises(ValueError):
        ObstacleSet(["a", "a"], [(0, 0), (1, 1)])
    with pytest.raises(ValueError):
        s.points[0, 0] = 9.0  # read-only storage


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        VehicleState(math.nan, 0)
    with pytest.raises(ValueError):
        ControlInput(math.inf, 0)


def test_goal_arrival():
    g = GoalSpec(1, 1, arrival_radius=0.5)
    assert g.reached(VehicleState(1.3, 1.3))
    assert not g.reached(VehicleState(2, 2))
