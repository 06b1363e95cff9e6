import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from purearl import tabular
from purearl.envs import load_maze
from purearl.errors import ConfigError, PolicyEquivalenceError, ShapeError, UnreachableGoalError


@pytest.fixture
def chain():
    # 0 <-> 1 <-> 2, action 0 left, action 1 right
    return tabular.FiniteMDP(np.array([[0, 1], [0, 2], [1, 2]]), gamma=0.9, name="chain")


@pytest.fixture
def fourrooms():
    return tabular.fourrooms_mdp()


class TestFiniteMDP:
    def test_chain_values(self, chain):
        values, greedy = tabular.value_iteration(chain, 2)
        np.testing.assert_allclose(values, [-1.9, -1.0, 0.0], atol=1e-10)
        assert greedy.tolist() == [1, 1, 0], greedy

    def test_values_match_distances(self, fourrooms):
        distances = fourrooms.distances()
        for g in (0, 17, fourrooms.n_states - 1):
            values, _ = tabular.value_iteration(fourrooms, g)
            expected = -(1 - fourrooms.gamma ** distances[:, g]) / (1 - fourrooms.gamma)
            np.testing.assert_allclose(values, expected, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_greedy_paths_are_shortest(self, seed):
        mdp = tabular.random_gridmaze(np.random.default_rng(seed))
        distances = mdp.distances()
        for g in mdp.goals:
            _, greedy = tabular.value_iteration(mdp, int(g))
            for s in range(mdp.n_states):
                state, steps = s, 0
                while state != g:
                    state = int(mdp.next_state[state, greedy[state]])
                    steps += 1
                    assert steps <= mdp.n_states, (s, g)
                assert steps == distances[s, g], (s, g, steps)

    def test_unreachable(self):
        with pytest.raises(UnreachableGoalError) as excinfo:
            tabular.FiniteMDP(np.array([[0], [1]]))
        assert excinfo.value.pair in ((1, 0), (0, 1)), excinfo.value.pair

    def test_restricted_goals_may_be_unreachable_elsewhere(self):
        # state 1 can reach 0 but not the reverse
        mdp = tabular.FiniteMDP(np.array([[0], [0]]), goals=[0])
        assert mdp.n_goals == 1

    @pytest.mark.parametrize(
        "kwargs,error",
        [
            ({"next_state": np.array([[0, 3]])}, ConfigError),
            ({"next_state": np.zeros((0, 2))}, ShapeError),
            ({"next_state": np.array([[0]]), "gamma": 1.0}, ConfigError),
            ({"next_state": np.array([[1], [0]]), "goals": [0, 0]}, ConfigError),
        ],
    )
    def test_invalid(self, kwargs, error):
        with pytest.raises(error):
            tabular.FiniteMDP(**kwargs)

    def test_from_maze(self):
        maze = load_maze("gridmaze5")
        mdp = tabular.FiniteMDP.from_maze(maze)
        assert mdp.n_states == len(maze.free_cells)
        assert mdp.n_actions == 4
        first = mdp.coords.tolist().index([1, 1])
        last = mdp.coords.tolist().index([5, 5])
        assert mdp.distances()[first, last] == 8

    def test_teleport_maze_rejected(self):
        with pytest.raises(ConfigError):
            tabular.FiniteMDP.from_maze(load_maze("teleport15"))

    def test_transition_absorbs_at_goal(self, chain):
        uniform = np.full((3, 2), 0.5)
        matrix = chain.transition_matrix(uniform, 1)
        np.testing.assert_array_equal(matrix[1], [0.0, 1.0, 0.0])
        np.testing.assert_allclose(matrix.sum(axis=1), np.ones(3))


class TestOccupancy:
    def test_slices_sum_to_one(self, fourrooms):
        behaviour = tabular.epsilon_greedy(tabular.optimal_policy_table(fourrooms), 0.3)
        d = tabular.occupancy(fourrooms, behaviour)
        np.testing.assert_allclose(d.goal_mass(), np.ones(fourrooms.n_goals))
        assert np.all(d.values >= 0.0)

    def test_matches_series(self, chain):
        behaviour = tabular.epsilon_greedy(tabular.optimal_policy_table(chain), 0.5)
        exact = tabular.occupancy(chain, behaviour)
        series = tabular.occupancy_series(chain, behaviour)
        np.testing.assert_allclose(exact.values, series.values, atol=1e-10)

    def test_matches_monte_carlo(self, chain, rng):
        behaviour = tabular.epsilon_greedy(tabular.optimal_policy_table(chain), 0.5)
        exact = tabular.occupancy(chain, behaviour)
        estimate = tabular.occupancy_monte_carlo(chain, behaviour, rng, samples=200000)
        np.testing.assert_allclose(estimate.values, exact.values, atol=0.01)

    def test_gamma_zero_is_initial(self, chain):
        pi_star = tabular.optimal_policy_table(chain)
        initial = np.array([0.5, 0.5, 0.0])
        d = tabular.occupancy(chain, pi_star, gamma=0.0, initial=initial)
        np.testing.assert_allclose(d.values.sum(axis=1)[:, 0], initial)

    def test_goal_state_mass(self, chain):
        # from state 1 under the optimal policy for goal 2 the chain is at 2 after one step
        pi_star = tabular.optimal_policy_table(chain)
        d = tabular.occupancy(chain, pi_star, goals=[2], initial=np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(d.values.sum(axis=1)[:, 0], [0.0, 0.1, 0.9])

    def test_policy_shape(self, chain):
        with pytest.raises(ShapeError):
            tabular.occupancy(chain, np.full((3, 2), 0.5))


class TestConcentrability:
    def test_self_is_one(self, fourrooms):
        d = tabular.occupancy(fourrooms, tabular.epsilon_greedy(tabular.optimal_policy_table(fourrooms), 0.2))
        value, witness = tabular.concentrability(d, d)
        assert math.isclose(value, 1.0, rel_tol=1e-12), value
        assert witness is not None

    def test_support_mismatch(self):
        star = np.zeros((2, 2, 1))
        star[1, 0, 0] = 1.0
        bc = np.zeros((2, 2, 1))
        bc[1, 1, 0] = 1.0
        value, witness = tabular.concentrability(star, bc)
        assert value == math.inf
        assert witness == (1, 0, 0), witness

    def test_ratio_and_witness(self):
        star = np.array([[[0.5], [0.5]]])
        bc = np.array([[[0.8], [0.2]]])
        value, witness = tabular.concentrability(star, bc)
        assert math.isclose(value, 2.5), value
        assert witness == (0, 1, 0), witness

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tabular.concentrability(np.ones((2, 2, 1)), np.ones((2, 2, 2)))

    def test_pi_star_is_worst_for_itself(self, chain):
        pi_star = tabular.optimal_policy_table(chain)
        value, _ = tabular.concentrability(tabular.occupancy(chain, pi_star), tabular.occupancy(chain, pi_star))
        assert math.isclose(value, 1.0)


class TestAggregation:
    @settings(deadline=None)
    @given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=2**16))
    def test_mass_preserved(self, n_classes, seed):
        rng = np.random.default_rng(seed)
        values = rng.random((6, 3, 4))
        class_of = rng.integers(n_classes, size=(6, 4))
        out = tabular.aggregate_table(values, class_of, n_classes)
        assert out.shape == (n_classes, 3)
        np.testing.assert_allclose(out.sum(axis=0), values.sum(axis=(0, 2)))

    @settings(deadline=None)
    @given(st.integers(min_value=0, max_value=2**16))
    def test_aggregation_never_increases_ratio(self, seed):
        rng = np.random.default_rng(seed)
        star = rng.random((5, 2, 3))
        bc = rng.random((5, 2, 3)) + 0.01
        class_of = rng.integers(3, size=(5, 3))
        flat, _ = tabular.concentrability(star, bc)
        rep, _ = tabular.concentrability(
            tabular.aggregate_table(star, class_of, 3), tabular.aggregate_table(bc, class_of, 3)
        )
        assert rep <= flat * tabular.RATIO_TOLERANCE, (rep, flat)

    def test_dense_ids(self):
        amap = tabular.AbstractionMap(np.array([[5, 9], [9, 2]]), np.array([[[1, 0], [1, 0]], [[0, 0], [1, 0]]]))
        assert amap.phi_h.tolist() == [[1, 2], [2, 0]], amap.phi_h
        assert amap.n_high == 3
        assert amap.n_low == 2

    def test_unknown_level(self, chain):
        lift = tabular.HierarchyLift(chain, 1)
        d = tabular.occupancy(chain, tabular.optimal_policy_table(chain))
        with pytest.raises(ConfigError):
            tabular.aggregate(d, tabular.identity_map(lift), "middle")


class TestHierarchyLift:
    def test_discounts(self):
        mdp = tabular.fourrooms_mdp(gamma=0.99)
        lift = tabular.HierarchyLift(mdp, 25)
        assert abs(lift.gamma_h - 0.7778) < 1e-4, lift.gamma_h
        assert math.isclose(lift.gamma_l, 0.96)
        assert lift.high_mdp.gamma == lift.gamma_h

    def test_relative_options(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 2)
        assert lift.relative
        # every offset within two moves on a grid
        assert lift.n_options == 13, lift.n_options
        star = tabular.optimal_policy_table(fourrooms)
        high = lift.high_policy(star)
        np.testing.assert_allclose(high[:, fourrooms.goals, :].sum(axis=-1), 1.0)

    def test_waypoints_follow_optimal_path(self, chain):
        lift = tabular.HierarchyLift(chain, 2)
        assert not lift.relative
        assert lift.waypoint_star[0, 2] == 2
        assert lift.waypoint_star[2, 0] == 0
        assert lift.waypoint_star[1, 1] == 1

    def test_low_initial(self, chain):
        initial = tabular.HierarchyLift(chain, 1).low_initial()
        np.testing.assert_allclose(initial.sum(axis=0), np.ones(3))
        np.testing.assert_allclose(initial[:, 0], [0.5, 0.5, 0.0])

    def test_n_must_be_positive(self, chain):
        with pytest.raises(ConfigError):
            tabular.HierarchyLift(chain, 0)

    def test_option_counts(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 2)
        high = lift.high_policy(tabular.optimal_policy_table(fourrooms))
        relative, absolute = lift.option_counts(high)
        assert relative <= lift.n_options
        assert absolute == fourrooms.n_states, absolute


class TestMaps:
    def test_refined_maps_are_policy_respecting(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 2)
        tabular.check_policy_equivalence(tabular.displacement_map(lift), lift)
        tabular.check_policy_equivalence(tabular.optimal_option_map(lift), lift)
        tabular.check_policy_equivalence(tabular.identity_map(lift), lift)

    def test_unrefined_map_rejected(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 2)
        with pytest.raises(PolicyEquivalenceError) as excinfo:
            tabular.check_policy_equivalence(tabular.displacement_map(lift, refine=False), lift)
        assert len(excinfo.value.witness) == 2

    def test_displacement_needs_coords(self, chain):
        with pytest.raises(ConfigError):
            tabular.displacement_map(tabular.HierarchyLift(chain, 1))


class TestOrderings:
    def test_identity_map_changes_nothing(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 2)
        behaviour = tabular.epsilon_greedy(tabular.optimal_policy_table(fourrooms), 0.2)
        report = tabular.verify_orderings(fourrooms, behaviour, tabular.identity_map(lift), 2, lift)
        assert math.isclose(report.kappa_rep_h, report.kappa_h, rel_tol=1e-9), report
        assert math.isclose(report.kappa_rep_l, report.kappa_l, rel_tol=1e-9), report
        assert report.n_classes_high == fourrooms.n_states * fourrooms.n_goals

    def test_fourrooms_strictness(self, fourrooms):
        lift = tabular.HierarchyLift(fourrooms, 1)
        top_left = tabular.room_region(fourrooms, (1, 5), (1, 5))
        behaviour = tabular.region_masked_expert(tabular.optimal_policy_table(fourrooms), top_left)
        report = tabular.verify_orderings(fourrooms, behaviour, tabular.displacement_map(lift), 1, lift)
        assert report.kappa == math.inf
        assert report.kappa_l == math.inf
        assert report.kappa_rep_l < report.kappa_l, report
        assert report.gamma_l == 0.0
        assert report.concentrability_ok

    def test_sweep(self):
        reports = tabular.run_sweep(20, 25, seed=11)
        assert len(reports) == 20
        for report in reports:
            assert report.concentrability_ok, report.name
            assert report.horizon_ok, report.name
            assert report.cardinality_ok, report.name
            assert report.kappa_rep_h <= report.kappa_h * tabular.RATIO_TOLERANCE
            assert report.kappa_rep_l <= report.kappa_l * tabular.RATIO_TOLERANCE

    def test_report_writers(self):
        reports = tabular.run_sweep(2, 25, seed=1)
        records = io.StringIO()
        tabular.write_report_records(records, reports)
        lines = records.getvalue().splitlines()
        assert len(lines) == 2
        assert set(json.loads(lines[0])) >= set(tabular.CSV_COLUMNS)
        table = io.StringIO()
        tabular.write_report_csv(table, reports)
        rows = table.getvalue().splitlines()
        assert rows[0] == ",".join(tabular.CSV_COLUMNS), rows[0]
        assert len(rows) == 3

    def test_bound_terms(self):
        terms = tabular.sample_complexity_terms(10, 10, 4, 13, 0.99, 5, 7, 9)
        assert math.isclose(terms["flat"], 10 * 10 * 4 * 1e6, rel_tol=1e-9)
        assert terms["high"] < terms["flat"]
        assert terms["misspecified_high"] > terms["high"]
        assert math.isclose(terms["abstract_low"], 9 * 4 * 125)

    def test_ring_sweep_uses_absolute_options(self, rng):
        mdp = tabular.ring_mdp(rng, 6, 3)
        lift = tabular.HierarchyLift(mdp, 2)
        assert not lift.relative
        report = tabular.verify_orderings(
            mdp, tabular.epsilon_greedy(tabular.optimal_policy_table(mdp), 0.2), tabular.optimal_option_map(lift), 2, lift
        )
        assert report.omega_rel == report.omega_abs
