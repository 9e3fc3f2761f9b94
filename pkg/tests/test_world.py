import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latsync.world import (AgentPose, BoxSet, Scenario, WorldConfig, full_occupancy, generate_scenario,
                           ground_truth_boxes, observe)

from oracles import observe_raycast


def small_cfg(**kw):
    base = dict(grid=16, lo=-8.0, hi=8.0, size_min=1.5, size_max=2.5, n_objects=3, duration=6,
                agent_radius=6.0, agent_range=12.0, speed_max=0.5)
    base.update(kw)
    return WorldConfig(**base)


def hand_scenario(boxes, agents, duration=1, velocity=None, **kw):
    """Scenario with objects given as (x_min, y_min, x_max, y_max) at frame 0."""
    cfg = small_cfg(n_objects=len(boxes), duration=duration, **kw)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    sizes = boxes[:, 2:] - boxes[:, :2]
    c0 = (boxes[:, :2] + boxes[:, 2:]) / 2
    vel = np.zeros_like(c0) if velocity is None else np.asarray(velocity, dtype=float)
    centers = np.stack([c0 + t * vel for t in range(duration)])
    return Scenario(cfg, 0, sizes, centers, np.broadcast_to(vel, centers.shape).copy(), agents)


def agent(x, y, facing, half=np.pi, rng=20.0):
    return AgentPose((x, y), facing, half, rng)


# -- generate_scenario --------------------------------------------------------------
def test_same_seed_bitwise_identical():
    cfg = WorldConfig()
    a, b = generate_scenario(cfg, 0), generate_scenario(cfg, 0)
    assert a.to_json() == b.to_json()
    assert a.centers.tobytes() == b.centers.tobytes()


def test_different_seeds_differ():
    cfg = WorldConfig()
    assert generate_scenario(cfg, 0).to_json() != generate_scenario(cfg, 1).to_json()


def test_zero_objects_empty_ground_truth():
    s = generate_scenario(WorldConfig(n_objects=0, duration=5), 3)
    for t in range(5):
        assert len(ground_truth_boxes(s, t)) == 0
        assert not observe(s, 0, t).grid.any()


def test_trajectories_stay_in_bounds():
    cfg = WorldConfig(n_objects=10, duration=100, speed_max=1.0, accel_noise=0.05)
    s = generate_scenario(cfg, 7)
    for t in range(cfg.duration):
        b = s.boxes_at(t)
        assert np.all(b[:, :2] >= cfg.lo) and np.all(b[:, 2:] <= cfg.hi), t


def test_no_initial_overlap():
    s = generate_scenario(WorldConfig(n_objects=10), 11)
    b = s.boxes_at(0)
    for i in range(len(b)):
        for j in range(i + 1, len(b)):
            overlap = (b[i, 0] < b[j, 2]) and (b[j, 0] < b[i, 2]) and (b[i, 1] < b[j, 3]) and (b[j, 1] < b[i, 3])
            assert not overlap


def test_speed_cap_respected():
    cfg = WorldConfig(speed_max=0.7, accel_noise=0.1, duration=40)
    s = generate_scenario(cfg, 2)
    assert np.linalg.norm(s.velocities, axis=-1).max() <= 0.7 + 1e-12


def test_constant_velocity_displacement():
    cfg = WorldConfig(duration=20)
    s = generate_scenario(cfg, 4)
    for t in range(cfg.duration - 3):
        np.testing.assert_allclose(s.centers[t + 3] - s.centers[t], 3 * s.velocities[t], atol=1e-12)


def test_infeasible_placement_names_constraint():
    cfg = WorldConfig(lo=-4, hi=4, size_min=3.5, size_max=3.9, n_objects=20, max_retries=200)
    with pytest.raises(RuntimeError, match="non-overlapping"):
        generate_scenario(cfg, 0)


@pytest.mark.parametrize("field,value", [("n_agents", 1), ("size_min", 0.0), ("agent_half_angle", 4.0),
                                         ("hi", -40.0), ("dropout", 1.0), ("speed_min", 2.0)])
def test_invalid_config_rejected(field, value):
    with pytest.raises(ValueError):
        generate_scenario(dataclasses.replace(WorldConfig(), **{field: value}), 0)


def test_json_round_trip():
    s = generate_scenario(WorldConfig(accel_noise=0.02), 5)
    back = Scenario.from_json(s.to_json())
    assert back.to_json() == s.to_json()
    for t in (0, 10, 29):
        np.testing.assert_array_equal(observe(back, 1, t).grid, observe(s, 1, t).grid)


def test_agents_count_and_views():
    s = generate_scenario(WorldConfig(n_agents=4), 0)
    assert s.n_agents == 4
    assert all(a.range > 0 and 0 < a.half_angle <= np.pi for a in s.agents)


# -- observe ------------------------------------------------------------------------
def test_occluded_object_invisible():
    # agent at the left edge, near blocker in front, far object exactly behind it
    s = hand_scenario([(-3, -2, -1, 2), (3, -1, 5, 1)], [agent(-7.5, 0.0, 0.0), agent(7.5, 7.5, np.pi)])
    grid = observe(s, 0, 0).grid[:, :, 0]
    assert grid[7:9, 5:7].any()                    # blocker seen
    assert not grid[7:9, 11:13].any()              # hidden object
    open_s = hand_scenario([(-3, -2, -1, 2), (3, -1, 5, 1)], [agent(-7.5, 0.0, 0.0), agent(7.5, 7.5, np.pi)],
                           occlusion=False)
    assert observe(open_s, 0, 0).grid[7:9, 11:13, 0].all()


def test_object_out_of_range_invisible():
    s = hand_scenario([(5, 5, 7, 7)], [agent(-7.5, -7.5, np.pi / 4, rng=5.0), agent(7.5, -7.5, np.pi)])
    assert not observe(s, 0, 0).grid.any()


def test_object_outside_sector_invisible():
    # agent looks left, object is to its right
    s = hand_scenario([(4, -1, 6, 1)], [agent(0.0, 0.0, np.pi, half=0.5), agent(7.5, 7.5, np.pi)])
    assert not observe(s, 0, 0).grid.any()


@pytest.mark.parametrize("seed", range(6))
def test_observe_matches_raycast_oracle(seed):
    s = generate_scenario(small_cfg(n_objects=4, agent_half_angle=1.2), seed)
    for a in range(s.n_agents):
        np.testing.assert_array_equal(observe(s, a, 2).grid[:, :, 0], observe_raycast(s, a, 2))


@given(seed=st.integers(0, 2**32 - 1), frame=st.integers(0, 5))
@settings(max_examples=25)
def test_observation_subset_of_full_occupancy(seed, frame):
    s = generate_scenario(small_cfg(dropout=0.2), seed)
    full = full_occupancy(s, frame)
    for a in range(s.n_agents):
        g = observe(s, a, frame).grid
        assert g.shape == full.shape and np.all(g <= full)
        assert set(np.unique(g)) <= {0.0, 1.0}


def test_dropout_deterministic():
    s = generate_scenario(WorldConfig(dropout=0.3), 9)
    np.testing.assert_array_equal(observe(s, 0, 4).grid, observe(s, 0, 4).grid)


def test_observe_errors():
    s = generate_scenario(small_cfg(), 0)
    with pytest.raises(KeyError):
        observe(s, 5, 0)
    with pytest.raises(IndexError):
        observe(s, 0, 6)


# -- ground truth -------------------------------------------------------------------
def test_hand_built_ground_truth():
    boxes = [(-6, -6, -4, -3), (1, 2, 3.5, 4)]
    s = hand_scenario(boxes, [agent(-7.5, 0, 0), agent(7.5, 0, np.pi)])
    gt = ground_truth_boxes(s, 0)
    np.testing.assert_array_equal(gt.boxes, boxes)
    np.testing.assert_array_equal(gt.scores, [1.0, 1.0])


def test_ground_truth_not_limited_by_views():
    # nobody sees the object, it is still ground truth
    s = hand_scenario([(5, 5, 7, 7)], [agent(-7.5, -7.5, np.pi, half=0.2), agent(-7.5, 7.5, np.pi, half=0.2)])
    assert not any(observe(s, a, 0).grid.any() for a in range(2))
    assert len(ground_truth_boxes(s, 0)) == 1


def test_region_excluding_objects_empty():
    s = hand_scenario([(-6, -6, -4, -3)], [agent(-7.5, 0, 0), agent(7.5, 0, np.pi)])
    assert len(ground_truth_boxes(s, 0, region=(0, 0, 8, 8))) == 0


def test_region_clips_boxes():
    s = hand_scenario([(-2, -2, 2, 2)], [agent(-7.5, 0, 0), agent(7.5, 0, np.pi)])
    np.testing.assert_array_equal(ground_truth_boxes(s, 0, region=(0, -8, 8, 8)).boxes, [[0, -2, 2, 2]])


def test_union_over_frames_matches_trajectory_sweep():
    vel = [(0.5, 0.0), (0.0, -0.25)]
    s = hand_scenario([(-6, -6, -4, -4), (2, 2, 4, 4)], [agent(-7.5, 0, 0), agent(7.5, 0, np.pi)],
                      duration=5, velocity=vel)
    swept = set()
    for t in range(5):
        for (x0, y0, x1, y1), (vx, vy) in zip([(-6, -6, -4, -4), (2, 2, 4, 4)], vel):
            swept.add((x0 + t * vx, y0 + t * vy, x1 + t * vx, y1 + t * vy))
    got = {tuple(map(float, b)) for t in range(5) for b in ground_truth_boxes(s, t).boxes}
    assert got == swept


def test_boxset_validation():
    with pytest.raises(ValueError):
        BoxSet([[1, 1, 0, 2]], [1.0])
    with pytest.raises(ValueError):
        BoxSet([[0, 0, 1, 1]], [1.0, 0.5])
    assert len(BoxSet()) == 0
