import math

import numpy as np
import pytest

from ecpmpc.datasets import AgentSpec, SyntheticSpec, random_crowd, synthetic_scenario
from ecpmpc.geometry import ControlInput, GoalSpec, ObstacleSet, VehicleState
from ecpmpc.planner import SafetyConfig
from ecpmpc.predictor import BiasedPredictor, ConstantVelocityPredictor
from ecpmpc.sim import (
    ConfigError,
    EpisodeConfig,
    EpisodeLog,
    EpisodeTruncated,
    MetricsReport,
    StepRecord,
    compute_metrics,
    metrics_from_steps_csv,
    read_coverage_csv,
    run_episode,
    running_coverage,
)


def config(scenario, **kw):
    kw.setdefault("start_state", VehicleState(0, 0, 0))
    kw.setdefault("goal", GoalSpec(2, 0))
    kw.setdefault("t_max", 40)
    return EpisodeConfig(scenario, **kw)


def ring_scenario(n=16, r0=4.2, speed=1.0, stop=10, frames=120):
    agents = []
    for k in range(n):
        a = 2 * math.pi * k / n
        agents.append(AgentSpec("linear", (r0 * math.cos(a), r0 * math.sin(a)),
                                (-speed * math.cos(a), -speed * math.sin(a)), jumps=[(stop, (0, 0))]))
    return synthetic_scenario(SyntheticSpec(tuple(agents), frames, name="ring"))


def test_free_space_arrival():
    log = run_episode(config(synthetic_scenario(SyntheticSpec(n_frames=100))))
    m = compute_metrics(log)
    assert log.arrived and m.travel_time < 40
    assert m.collision_rate == 0 and m.infeasibility_rate == 0


def test_pinned_vehicle_falls_back_to_stop():
    cfg = config(ring_scenario(), t_max=25)
    log = run_episode(cfg)
    assert not log.arrived and len(log.records) == 25
    assert all(not r.feasible for r in log.records)
    assert all(r.applied == ControlInput(0, 0) and r.plan is None for r in log.records)
    assert all(r.state == cfg.start_state for r in log.records)
    m = compute_metrics(log, cfg)
    assert m.infeasibility_rate == 1.0 and m.travel_time == 25
    # fallback cost: the vehicle stands 2 m from the goal for 12 steps plus terminal
    assert m.average_cost == pytest.approx(12 * 4 + 10 * 4)


def crowd(seed=1, frames=200):
    return synthetic_scenario(random_crowd(8, (-6, 6, -6, 6), frames, seed=seed, noise_std=0.03))


def test_replay_is_bit_identical(tmp_path):
    cfg = lambda: config(crowd(), start_state=VehicleState(-4, -4, 0.7), goal=GoalSpec(4, 4),
                         predictor=BiasedPredictor(ConstantVelocityPredictor(12), (0.05, 0)), t_max=60)
    a, b = run_episode(cfg()), run_episode(cfg())
    assert a.records == b.records and a.coverage == b.coverage
    for name, log in (("a", a), ("b", b)):
        log.write_steps_csv(tmp_path / f"{name}.csv")
        log.write_radii_csv(tmp_path / f"{name}_r.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_r.csv").read_bytes() == (tmp_path / "b_r.csv").read_bytes()


def test_controllers_coincide_when_predictions_are_exact():
    agents = tuple(AgentSpec("stationary", p) for p in [(1, 0.8), (1.5, -0.9), (3, 0.2)])
    scen = synthetic_scenario(SyntheticSpec(agents, 120))
    logs = [run_episode(config(scen, goal=GoalSpec(4, 0), controller=c, t_max=50)) for c in ("ecp", "acp")]
    ecp, acp = logs
    assert [r.state for r in ecp.records] == [r.state for r in acp.records]
    assert [r.plan for r in ecp.records] == [r.plan for r in acp.records]
    assert all(s.radius == 0 for r in ecp.records for s in r.radii)


def test_coverage_log_matches_offline_recomputation(tmp_path):
    for controller in ("ecp", "acp"):
        log = run_episode(config(crowd(2), controller=controller, start_state=VehicleState(-4, 4, -0.7),
                                 goal=GoalSpec(4, -4), t_max=60))
        path = tmp_path / f"{controller}.csv"
        log.write_coverage_csv(path)
        offline = running_coverage(controller, read_coverage_csv(path))
        assert offline == log.running_coverage()
        assert offline
        keys = set(offline)
        if controller == "acp":
            assert keys == {f"h{i}" for i in range(1, 13)}
        else:
            assert keys == {f"u{k}" for k in range(9)}


def test_collisions_use_realized_obstacles():
    log = EpisodeLog("ecp", "x", 0, 0.3, 10, 9)
    for k, clearance in enumerate([1.0, 0.29, 0.31, 0.0]):
        log.records.append(StepRecord(k, k, VehicleState(0, 0), ControlInput(0, 0), True, 2.0,
                                      ObstacleSet.empty(), clearance, (0, 0, 0)))
    m = compute_metrics(log)
    assert m.collision_rate == 0.5 and m.travel_time == 10 and m.average_cost == 2.0


def test_metric_examples(tmp_path):
    log = EpisodeLog("acp", "x", 0, 0.3, 100, 9, arrived=True)
    for k in range(100):
        log.records.append(StepRecord(k, k, VehicleState(0, 0), ControlInput(0, 0), k not in (3, 50, 99),
                                      float(k), ObstacleSet.empty(), math.inf, None))
    m = compute_metrics(log)
    assert m.infeasibility_rate == pytest.approx(0.03) and m.collision_rate == 0.0
    assert m.travel_time == 100 and m.average_cost == pytest.approx(49.5)
    log.write_steps_csv(tmp_path / "s.csv")
    again = metrics_from_steps_csv(tmp_path / "s.csv", 0.3, 100, True)
    assert (again.infeasibility_rate, again.collision_rate, again.average_cost) == (
        m.infeasibility_rate, m.collision_rate, m.average_cost)
    m.to_json(tmp_path / "m.json")
    assert MetricsReport.from_json(tmp_path / "m.json") == m

    single = EpisodeLog("ecp", "x", 0, 0.3, 50, 9, records=log.records[:1])
    assert compute_metrics(single).average_cost == 0.0
    with pytest.raises(ValueError):
        compute_metrics(EpisodeLog("ecp", "x", 0, 0.3, 50, 9))


def test_exhausted_scenario_truncates_with_partial_log():
    scen = synthetic_scenario(SyntheticSpec(n_frames=30))
    with pytest.raises(EpisodeTruncated) as err:
        run_episode(config(scen, goal=GoalSpec(50, 0), t_max=40))
    assert len(err.value.log.records) == 10


@pytest.mark.parametrize(
    "kw, field",
    [({"gamma": -1.0}, "gamma"), ({"gamma": 0.0}, "gamma"), ({"t_max": 20}, "t_max"),
     ({"controller": "pid"}, "controller"), ({"n_epochs": 5}, "n_epochs"), ({"target_alpha": 1.0}, "target_alpha"),
     ({"calibrate": "none"}, "calibrate"), ({"predictor": ConstantVelocityPredictor(6)}, "predictor")],
)
def test_config_validation(kw, field):
    with pytest.raises(ConfigError) as err:
        config(synthetic_scenario(SyntheticSpec(n_frames=100)), **kw).validate()
    assert err.value.field == field


def test_warmup_holds_start_state():
    scen = crowd(3)
    cfg = config(scen, start_frame=5, t_max=30, goal=GoalSpec(9, 9))
    log = run_episode(cfg)
    assert log.records[0].frame == 5 + 8 + 12
    assert log.records[0].state == cfg.start_state
