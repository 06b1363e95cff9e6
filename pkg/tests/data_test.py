import io

import numpy as np
import pytest

from purearl import data
from purearl.errors import ConfigError, UsageError


class TestDataset:
    def test_properties(self, counting_dataset):
        assert counting_dataset.n_trajectories == 3
        assert counting_dataset.horizon == 10
        assert counting_dataset.n_transitions == 30
        index = counting_dataset.flat_index()
        assert index[11].tolist() == [1, 1], index[11]

    @pytest.mark.parametrize(
        "states_shape,actions_shape",
        [((2, 5, 2), (2, 5, 2)), ((2, 5, 2), (3, 4, 2)), ((5, 2), (4, 2)), ((0, 1, 2), (0, 0, 2))],
    )
    def test_invalid_shapes(self, states_shape, actions_shape):
        with pytest.raises(ConfigError):
            data.Dataset(np.zeros(states_shape), np.zeros(actions_shape))

    def test_file(self, point_dataset, tmp_path):
        path = str(tmp_path / "d.parl")
        with open(path, "wb") as outfile:
            point_dataset.write_to(outfile)
        loaded = data.Dataset.from_file(path)
        np.testing.assert_array_equal(loaded.states, point_dataset.states)
        np.testing.assert_array_equal(loaded.actions, point_dataset.actions)
        assert loaded.env_id == "pointmaze5", loaded.env_id
        assert loaded.style == "stitch"
        assert loaded.goal_radius == point_dataset.goal_radius
        assert loaded.discrete is False

    def test_file_is_reproducible(self, point_dataset):
        first, second = io.BytesIO(), io.BytesIO()
        point_dataset.write_to(first)
        point_dataset.write_to(second)
        assert first.getvalue() == second.getvalue()

    def test_csv(self, counting_dataset):
        buffer = io.StringIO()
        counting_dataset.write_csv(buffer)
        lines = buffer.getvalue().splitlines()
        assert lines[0] == "traj,step,s0,s1,a0,a1", lines[0]
        assert len(lines) == 1 + 3 * 11, len(lines)
        assert lines[11].endswith(",,"), lines[11]

    def test_translated(self, counting_dataset):
        moved = counting_dataset.translated(np.array([5.0, -1.0]))
        np.testing.assert_array_equal(moved.states - counting_dataset.states, np.broadcast_to([5.0, -1.0], moved.states.shape))
        np.testing.assert_array_equal(moved.actions, counting_dataset.actions)


class TestGoalSampling:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            data.GoalSampleConfig(0.5, 0.5, 0.5, False, 0.9)
        with pytest.raises(ConfigError):
            data.GoalSampleConfig(0.2, 0.5, 0.3, False, 1.0)

    def test_waypoint_clamped(self, counting_dataset):
        traj = counting_dataset.states[1]
        assert data.sample_waypoint(traj, 2, 5)[0] == 107
        assert data.sample_waypoint(traj, 8, 5)[0] == 110

    @pytest.mark.parametrize(
        "geometric,discount,remaining,critical",
        [
            # chi-square 0.999 quantiles for remaining - 1 degrees of freedom
            (False, 0.9, 4, 16.27),
            (True, 0.5, 3, 13.82),
            (True, 0.9, 20, 43.82),
            (True, 0.99, 10, 27.88),
        ],
    )
    def test_offsets_goodness_of_fit(self, geometric, discount, remaining, critical, rng):
        draws = 100000
        cfg = data.GoalSampleConfig(0, 1, 0, geometric, discount)
        offsets = data.future_offsets(np.full(draws, remaining), cfg, rng)
        assert offsets.min() >= 1 and offsets.max() <= remaining, (offsets.min(), offsets.max())
        k = np.arange(1, remaining + 1)
        mass = discount ** (k - 1) if geometric else np.ones(remaining)
        expected = draws * mass / mass.sum()
        observed = np.bincount(offsets, minlength=remaining + 1)[1:]
        statistic = float(np.sum((observed - expected) ** 2 / expected))
        assert statistic < critical, (statistic, observed, expected)

    def test_offsets_zero_remaining(self, rng):
        cfg = data.GoalSampleConfig(0, 1, 0, True, 0.5)
        offsets = data.future_offsets(np.array([0, 1, 0]), cfg, rng)
        assert offsets.tolist() == [0, 1, 0], offsets

    @pytest.mark.parametrize(
        "cfg",
        [data.value_config(0.99), data.low_value_config(0.99), data.policy_config(0.99)],
    )
    def test_provenance_frequencies(self, counting_dataset, cfg, rng):
        batch = data.sample_batch(counting_dataset, 100000, cfg, 3, rng)
        freqs = np.bincount(batch.provenance, minlength=3) / len(batch)
        np.testing.assert_allclose(freqs, [cfg.p_cur, cfg.p_traj, cfg.p_rand], atol=0.01)

    def test_batch_consistency(self, counting_dataset, rng):
        batch = data.sample_batch(counting_dataset, 5000, data.value_config(0.99), 3, rng)
        anchors = 100 * batch.traj_idx + batch.step_idx
        np.testing.assert_array_equal(batch.observations[:, 0], anchors)
        np.testing.assert_array_equal(batch.next_observations[:, 0], anchors + 1)
        np.testing.assert_array_equal(batch.waypoints[:, 0], 100 * batch.traj_idx + np.minimum(batch.step_idx + 3, 10))

        cur = batch.provenance == data.CUR
        np.testing.assert_array_equal(batch.goals[cur], batch.observations[cur])
        assert np.all(batch.rewards[cur] == 0.0)
        traj = batch.provenance == data.TRAJ
        assert np.all(batch.goal_traj[traj] == batch.traj_idx[traj])
        assert np.all(batch.goal_step[traj] > batch.step_idx[traj])
        assert np.all(batch.rewards[traj] == -1.0)

    def test_replay(self, counting_dataset):
        cfg = data.policy_config(0.99)
        a = data.sample_batch(counting_dataset, 64, cfg, 2, np.random.default_rng(4))
        b = data.sample_batch(counting_dataset, 64, cfg, 2, np.random.default_rng(4))
        np.testing.assert_array_equal(a.goals, b.goals)

    def test_single_goal(self, counting_dataset, rng):
        cfg = data.GoalSampleConfig(0, 1, 0, False, 0.9)
        goal, provenance = data.sample_goal(counting_dataset, 2, 9, cfg, rng)
        assert provenance == data.TRAJ
        assert goal[0] == 210, goal

    def test_empty_batch(self, counting_dataset, rng):
        with pytest.raises(UsageError):
            data.sample_batch(counting_dataset, 0, data.value_config(0.99), 2, rng)

    def test_from_transitions(self):
        batch = data.SampledBatch.from_transitions(
            np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.array([[0.0, 0.0], [3.0, 3.0]])
        )
        assert batch.rewards.tolist() == [0.0, -1.0], batch.rewards
        assert batch.waypoint_rewards.tolist() == [-1.0, -1.0]
