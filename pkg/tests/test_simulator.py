import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdprior.geometry import AgentSpec, Scenario, count_collisions
from crowdprior.scenarios import BUILTIN, get_scenario
from crowdprior.simulator import (SocialForceParams, Trajectory, linear_init, mask_segment,
                                  read_dataset, simulate, split_train_test, write_dataset)


def open_scenario(agents, n_frames=20):
    return Scenario("open", 40, 40, [], [AgentSpec(0.3, s, g) for s, g in agents],
                    n_frames=n_frames)


def test_single_agent_walks_to_goal():
    sc = open_scenario([((5, 20), (15, 20))], n_frames=12)
    (tr,) = simulate(sc, SocialForceParams(start_jitter=1e-9), seed=0)
    assert np.all(np.diff(tr.points[:, 0]) >= -1e-12)
    assert np.linalg.norm(tr.points[-1] - (15, 20)) < 0.5
    assert tr.dt == pytest.approx(1.5)
    assert np.all(tr.mask == 1)


def test_head_on_pair_does_not_collide():
    sc = open_scenario([((5, 20), (35, 20)), ((35, 20.2), (5, 20.2))], n_frames=25)
    trajs = simulate(sc, seed=1)
    pts = np.stack([t.points for t in trajs])
    assert count_collisions(pts, sc.radii) == {"agent_agent": 0, "agent_obstacle": 0}
    # fine-grained check on the emitted frames as well
    assert np.linalg.norm(pts[0] - pts[1], axis=1).min() > 0.6


def test_zero_agents():
    assert simulate(open_scenario([])) == []


def test_overlapping_starts_rejected():
    sc = open_scenario([((5, 5), (10, 10)), ((5.2, 5), (12, 10))])
    with pytest.raises(ValueError):
        simulate(sc)


def test_simulate_deterministic_and_speed_bounded():
    sc = get_scenario("bottleneck-evacuation-2", 12)
    a = simulate(sc, seed=5)
    b = simulate(sc, seed=5)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.points, tb.points)
    params = SocialForceParams()
    speed = np.linalg.norm(np.diff(np.stack([t.points for t in a]), axis=1), axis=-1) / a[0].dt
    assert speed.max() <= params.desired_speed * params.max_speed_factor + 1e-9


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_builtin_scenarios_are_valid(name):
    sc = get_scenario(name)
    assert len(sc.agents) > 0 and sc.n_frames >= 2


def _traj(n, seed=0):
    pts = np.cumsum(np.random.default_rng(seed).normal(size=(n, 2)), axis=0)
    return Trajectory(seed, pts, np.ones(n, np.int8), 1.5)


def test_mask_segment_examples():
    tr = _traj(100)
    m = mask_segment(tr, 0.3, seed=4)
    zeros = np.flatnonzero(m.mask == 0)
    assert len(zeros) == 30 and np.all(np.diff(zeros) == 1)
    assert m.mask[0] == 1 and m.mask[99] == 1
    assert np.all(np.isnan(m.points[zeros]))
    np.testing.assert_array_equal(mask_segment(tr, 0.3, seed=4).mask, m.mask)
    assert np.sum(mask_segment(_traj(10), 0.1, seed=0).mask == 0) == 1


def test_mask_segment_rejects_bad_fraction():
    with pytest.raises(ValueError):
        mask_segment(_traj(10), 0.0, seed=0)
    with pytest.raises(ValueError):
        mask_segment(_traj(3), 0.9, seed=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 120), st.floats(0.05, 0.6), st.integers(0, 10**6))
def test_mask_segment_properties(n, fraction, seed):
    tr = _traj(n, seed % 7)
    k = int(np.floor(fraction * n + 0.5))
    if k < 1 or n - k < 2:
        return
    m = mask_segment(tr, fraction, seed)
    assert int(np.sum(m.mask == 0)) == k
    assert m.mask[0] == 1 and m.mask[-1] == 1
    keep = m.mask == 1
    np.testing.assert_array_equal(m.points[keep], tr.points[keep])
    filled = linear_init(m)
    np.testing.assert_array_equal(filled.points[keep], tr.points[keep])
    assert np.all(np.isfinite(filled.points))


def test_linear_init_examples():
    pts = np.array([[0, 0], [np.nan, np.nan], [np.nan, np.nan], [3, 0]], float)
    out = linear_init(Trajectory(0, pts, [1, 0, 0, 1], 1.5))
    np.testing.assert_allclose(out.points, [[0, 0], [1, 0], [2, 0], [3, 0]])
    mid = linear_init(Trajectory(0, [[0, 0], [np.nan, np.nan], [0, 4]], [1, 0, 1], 1.5))
    np.testing.assert_allclose(mid.points[1], (0, 2))
    tr = _traj(5)
    np.testing.assert_array_equal(linear_init(tr).points, tr.points)


def test_split_train_test():
    train, test = split_train_test(range(70), (6, 1), seed=3)
    assert len(train) == 60 and len(test) == 10
    assert sorted(train + test) == list(range(70))
    train, test = split_train_test(range(7), (6, 1), seed=3)
    assert (len(train), len(test)) == (6, 1)
    assert split_train_test(range(70), (6, 1), 9) == split_train_test(range(70), (6, 1), 9)
    with pytest.raises(ValueError):
        split_train_test([], (6, 1))


def test_dataset_roundtrip_is_bit_exact(tmp_path):
    trajs = [_traj(9, s) for s in range(3)]
    trajs[1] = mask_segment(trajs[1], 0.3, 0)
    path = tmp_path / "run.csv"
    write_dataset(path, trajs, "demo", 11)
    meta, back = read_dataset(path)
    assert meta["scenario"] == "demo" and meta["seed"] == 11 and meta["n_agents"] == 3
    for a, b in zip(trajs, back):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.mask, b.mask)
