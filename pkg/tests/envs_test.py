import numpy as np
import pytest

from purearl import envs
from purearl.errors import ConfigError, UnreachableGoalError


class TestMazeSpec:
    def test_builtins_load(self):
        for env_id in envs.MAZES:
            maze = envs.load_maze(env_id)
            assert maze.name == env_id
            assert maze.free_cells, env_id

    def test_unknown_id(self):
        with pytest.raises(ConfigError):
            envs.load_maze("nowhere")

    def test_text_round_trip(self):
        maze = envs.load_maze("pointmaze15")
        again = envs.MazeSpec.from_text("copy", maze.to_text())
        np.testing.assert_array_equal(again.walls, maze.walls)
        assert again.start_region == maze.start_region
        assert again.goal_cells == maze.goal_cells

    def test_env_hash_follows_text(self):
        a = envs.load_maze("pointmaze15")
        b = envs.load_maze("gridmaze15")
        assert a.env_hash() == envs.load_maze("pointmaze15").env_hash()
        assert a.env_hash() != b.env_hash()

    def test_unreachable_goal(self):
        text = "continuous = false\n#####\n#S#G#\n#####\n"
        with pytest.raises(UnreachableGoalError) as excinfo:
            envs.MazeSpec.from_text("split", text)
        assert excinfo.value.pair == ((1, 1), (1, 3)), excinfo.value.pair

    @pytest.mark.parametrize(
        "text",
        [
            "#####\n#.x.#\n#####\n",
            "#####\n#..#\n#####\n",
            "colour = red\n###\n#.#\n###\n",
            "###\n###\n",
        ],
    )
    def test_invalid_text(self, text):
        with pytest.raises(ConfigError):
            envs.MazeSpec.from_text("bad", text)

    def test_distances(self):
        maze = envs.load_maze("gridmaze5")
        assert maze.distance((1, 1), (1, 1)) == 0
        assert maze.distance((1, 1), (5, 5)) == 8
        # continuous steps scale by cells per step
        point = envs.load_maze("pointmaze5")
        assert point.steps_per_cell == 5, point.steps_per_cell
        start, goal = point.position_of((1, 1)), point.position_of((1, 3))
        assert point.optimal_steps(start, goal) == 10

    def test_parse_cells(self):
        assert envs.parse_cells("1:2, 3:4") == [(1, 2), (3, 4)]
        with pytest.raises(ConfigError):
            envs.parse_cells("1-2")


class TestStep:
    def test_discrete_moves_and_walls(self):
        maze = envs.load_maze("gridmaze5")
        state = envs.EnvState(maze.position_of((1, 1)))
        moved = envs.step(maze, state, envs.RIGHT)
        np.testing.assert_array_equal(moved.position, [1.0, 2.0])
        assert moved.steps == 1
        blocked = envs.step(maze, state, envs.UP)
        np.testing.assert_array_equal(blocked.position, [1.0, 1.0])

    def test_continuous_axis_clipping(self):
        maze = envs.load_maze("pointmaze5")
        state = envs.EnvState([1.1, 1.5])
        # up is blocked by the wall row, right is free
        moved = envs.step(maze, state, np.array([-1.0, 1.0]))
        np.testing.assert_allclose(moved.position, [1.1, 1.7])

    def test_actions_are_clipped(self):
        maze = envs.load_maze("pointmaze5")
        state = envs.EnvState([3.5, 3.5])
        moved = envs.step(maze, state, np.array([10.0, 0.0]))
        np.testing.assert_allclose(moved.position, [3.7, 3.5])

    def test_teleport(self):
        maze = envs.load_maze("teleport15")
        state = envs.EnvState([7.5, 6.9])
        moved = envs.step(maze, state, np.array([0.0, 1.0]), np.random.default_rng(0))
        assert maze.cell_of(moved.position) in maze.teleport_exits, moved

    def test_reward(self):
        goal = envs.GoalTest([1.0, 1.0], 0.5)
        assert envs.reward(np.array([1.2, 1.2]), goal) == 0.0
        assert envs.reward(np.array([2.0, 2.0]), goal) == -1.0
        rewards = envs.reward_batch(np.array([[1.0, 1.0], [3.0, 1.0]]), np.array([[1.0, 1.5], [1.0, 1.0]]), 0.5)
        np.testing.assert_array_equal(rewards, [0.0, -1.0])


class TestScriptedPolicy:
    @pytest.mark.parametrize("env_id", ["gridmaze15", "pointmaze15"])
    def test_reaches_goals(self, env_id):
        maze = envs.load_maze(env_id)
        policy = envs.ScriptedPolicy(maze)
        start = maze.position_of(maze.start_region[0])
        for goal_cell in maze.goal_cells:
            goal = maze.position_of(goal_cell)
            test = envs.GoalTest.for_spec(maze, goal)
            state = envs.EnvState(start)
            budget = 4 * maze.optimal_steps(start, goal)
            while not test.reached(state.position) and state.steps < budget:
                state = envs.step(maze, state, policy.act(state.position, goal))
            assert test.reached(state.position), (goal_cell, state)


class TestGenerateDataset:
    @pytest.mark.parametrize("style", envs.STYLES)
    def test_shapes(self, style):
        maze = envs.load_maze("pointmaze5")
        dataset = envs.generate_dataset(maze, style, 3, 12, 0.2, 5)
        assert dataset.states.shape == (3, 13, 2), dataset.states.shape
        assert dataset.actions.shape == (3, 12, 2), dataset.actions.shape
        assert np.all(np.abs(dataset.actions) <= 1.0)
        for position in dataset.states.reshape(-1, 2):
            assert maze.is_free_position(position), position

    def test_replay(self):
        maze = envs.load_maze("gridmaze15")
        a = envs.generate_dataset(maze, "stitch", 4, 20, 0.1, 9)
        b = envs.generate_dataset(maze, "stitch", 4, 20, 0.1, 9)
        c = envs.generate_dataset(maze, "stitch", 4, 20, 0.1, 10)
        np.testing.assert_array_equal(a.states, b.states)
        assert not np.array_equal(a.states, c.states)

    def test_prefix_stable(self):
        maze = envs.load_maze("gridmaze5")
        small = envs.generate_dataset(maze, "navigate", 2, 10, 0.2, 1)
        large = envs.generate_dataset(maze, "navigate", 5, 10, 0.2, 1)
        np.testing.assert_array_equal(small.states, large.states[:2])

    @pytest.mark.parametrize("env_id", ["gridmaze5", "pointmaze5"])
    def test_noise_free_navigate_is_shortest(self, env_id):
        maze = envs.load_maze(env_id)
        dataset = envs.generate_dataset(maze, "navigate", 10, 30, 0.0, 3)
        for states in dataset.states:
            cells = [maze.cell_of(p) for p in states]
            entered = [t for t in range(1, len(cells)) if cells[t] != cells[t - 1]]
            path = [cells[0]] + [cells[t] for t in entered]
            # the first target is at least this far, so the path there starts geodesic
            far = max(1, int(maze.distances_to(path[0]).max()) // 2)
            for k in range(1, min(far, len(path) - 1) + 1):
                assert maze.distance(path[k], path[0]) == k, (k, path)
                assert entered[k - 1] <= k * maze.steps_per_cell, (k, entered)

    def test_discrete_transitions(self):
        maze = envs.load_maze("gridmaze15")
        dataset = envs.generate_dataset(maze, "explore", 2, 30, 0.0, 3)
        steps = np.abs(np.diff(dataset.states, axis=1)).sum(axis=-1)
        assert np.all(steps <= 1.0), steps

    @pytest.mark.parametrize("kwargs", [{"behaviour": "wander"}, {"n_trajectories": 0}, {"noise": 1.5}])
    def test_invalid(self, kwargs):
        args = {"behaviour": "stitch", "n_trajectories": 2, "horizon": 5, "noise": 0.1, "seed": 0}
        args.update(kwargs)
        with pytest.raises(ConfigError):
            envs.generate_dataset(envs.load_maze("gridmaze5"), **args)

    def test_goal_lists(self):
        maze = envs.load_maze("gridmaze15")
        start = maze.start_region[0]
        for cell in envs.adjacent_goals(maze, start):
            assert maze.distance(start, cell) == 1, cell
        for cell in envs.far_goals(maze, start, 20):
            assert maze.distance(start, cell) >= 20, cell
