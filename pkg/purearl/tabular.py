"""
Finite-MDP concentrability analysis
-----------------------------------

Exact tools for small deterministic goal-conditioned MDPs: value iteration,
discounted occupancy measures, concentrability coefficients, aggregation of
occupancies under state-goal abstractions, and a report checking that
hierarchy plus abstraction shrinks every term of the offline error bound.

Rewards are -1 per step and 0 at the goal. Conditioned on a goal g, the goal
state is absorbing whatever action is taken there.

Occupancy tables are indexed (s, a, g) and hold the measure conditioned on
each goal, so every goal slice sums to one. Concentrability ratios are
unaffected by the conditioning since both sides share the goal distribution.
"""

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    TextIO,
    Tuple,
    Union,
)

import numpy as np
from typing_extensions import Self

from .envs import MOVES, MazeSpec, flood_fill, load_maze
from .errors import (
    ConfigError,
    PolicyEquivalenceError,
    ShapeError,
    UnreachableGoalError,
)

logger = logging.getLogger(__name__)

VI_TOLERANCE = 1e-12
# concentrability comparisons allow this relative slack for float summation
RATIO_TOLERANCE = 1.0 + 1e-12

Witness = Optional[Tuple[int, ...]]


class FiniteMDP:
    """
    deterministic MDP with next_state[s, a], a goal set and optional 2-D
    coordinates per state
    """

    next_state: np.ndarray
    goals: np.ndarray
    gamma: float
    coords: Optional[np.ndarray]
    name: str
    _distances: Optional[np.ndarray]
    _optimal_actions: Optional[np.ndarray]

    def __init__(
        self,
        next_state: np.ndarray,
        goals: Optional[Iterable[int]] = None,
        gamma: float = 0.99,
        coords: Optional[np.ndarray] = None,
        name: str = "mdp",
    ):
        self.next_state = np.array(next_state, dtype=np.int64)
        if self.next_state.ndim != 2 or self.next_state.size == 0:
            raise ShapeError(f"next_state must be [S, A], got {self.next_state.shape}")
        n_states = self.next_state.shape[0]
        if self.next_state.min() < 0 or self.next_state.max() >= n_states:
            raise ConfigError(f"{name}: next_state maps outside [0, {n_states})")
        self.goals = np.arange(n_states) if goals is None else np.array(list(goals), dtype=np.int64)
        if len(self.goals) == 0 or len(set(self.goals.tolist())) != len(self.goals):
            raise ConfigError(f"{name}: goal set must be non-empty and unique")
        if self.goals.min() < 0 or self.goals.max() >= n_states:
            raise ConfigError(f"{name}: goal outside the state space")
        if not 0.0 <= gamma < 1.0:
            raise ConfigError(f"{name}: gamma must be in [0, 1), got {gamma}")
        self.gamma = float(gamma)
        if coords is not None:
            coords = np.array(coords, dtype=np.int64)
            if coords.shape != (n_states, 2):
                raise ShapeError(f"coords must be [{n_states}, 2], got {coords.shape}")
        self.coords = coords
        self.name = name
        self._distances = None
        self._optimal_actions = None

        distances = self.distances()
        for g in self.goals:
            unreachable = np.flatnonzero(distances[:, g] < 0)
            if len(unreachable):
                s = int(unreachable[0])
                raise UnreachableGoalError(f"{name}: goal {g} unreachable from state {s}", (s, int(g)))

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.name}, S={self.n_states}, A={self.n_actions}, G={self.n_goals})"

    @property
    def n_states(self) -> int:
        return int(self.next_state.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.next_state.shape[1])

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    def with_goals(self, goals: Optional[Iterable[int]], gamma: Optional[float] = None) -> "FiniteMDP":
        return FiniteMDP(
            self.next_state,
            goals,
            self.gamma if gamma is None else gamma,
            self.coords,
            self.name,
        )

    def distances(self) -> np.ndarray:
        """[S, S] shortest step counts from s to t, -1 when t is unreachable"""
        if self._distances is None:
            preds: List[List[int]] = [[] for _ in range(self.n_states)]
            for s in range(self.n_states):
                for t in set(self.next_state[s].tolist()):
                    preds[t].append(s)
            distances = np.full((self.n_states, self.n_states), -1, dtype=np.int64)
            for target in range(self.n_states):
                distances[target, target] = 0
                queue = deque([target])
                while queue:
                    t = queue.popleft()
                    for s in preds[t]:
                        if distances[s, target] < 0:
                            distances[s, target] = distances[t, target] + 1
                            queue.append(s)
            self._distances = distances
        return self._distances

    def transition_matrix(self, policy: np.ndarray, g: int) -> np.ndarray:
        """P[s, s'] under per-state action probabilities policy[s, a], absorbing at g"""
        matrix = np.zeros((self.n_states, self.n_states))
        rows = np.repeat(np.arange(self.n_states), self.n_actions)
        np.add.at(matrix, (rows, self.next_state.reshape(-1)), policy.reshape(-1))
        matrix[g] = 0.0
        matrix[g, g] = 1.0
        return matrix

    def optimal_actions(self) -> np.ndarray:
        """[S, S] greedy optimal action for every (state, target state)"""
        if self._optimal_actions is None:
            table = np.zeros((self.n_states, self.n_states), dtype=np.int64)
            for g in range(self.n_states):
                _, table[:, g] = value_iteration(self, g)
            self._optimal_actions = table
        return self._optimal_actions

    @classmethod
    def from_maze(cls, spec: MazeSpec, gamma: float = 0.99, goals: Optional[Iterable[int]] = None) -> Self:
        """
        one state per free cell in row-major order, four moves, blocked moves
        stay put; goals default to every state
        """
        if spec.teleport_pads:
            raise ConfigError(f"maze {spec.name} has teleports, its cell graph is not deterministic")
        cells = spec.free_cells
        index = {cell: i for i, cell in enumerate(cells)}
        next_state = np.zeros((len(cells), len(MOVES)), dtype=np.int64)
        for i, (r, c) in enumerate(cells):
            for a, (dr, dc) in enumerate(MOVES):
                next_state[i, a] = index.get((int(r + dr), int(c + dc)), i)
        return cls(next_state, goals, gamma, np.array(cells), spec.name)


def value_iteration(mdp: FiniteMDP, g: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    optimal values and greedy actions for target state g

    ties break toward the lowest action index; the goal itself gets action 0
    """
    distances = mdp.distances()[:, g]
    if np.any(distances < 0):
        s = int(np.flatnonzero(distances < 0)[0])
        raise UnreachableGoalError(f"{mdp.name}: state {g} unreachable from state {s}", (s, g))
    values = np.zeros(mdp.n_states)
    while True:
        q = -1.0 + mdp.gamma * values[mdp.next_state]
        updated = q.max(axis=1)
        updated[g] = 0.0
        residual = float(np.max(np.abs(updated - values)))
        values = updated
        if residual < VI_TOLERANCE:
            break
    greedy = np.argmax(-1.0 + mdp.gamma * values[mdp.next_state], axis=1)
    greedy[g] = 0
    return values, greedy


def optimal_policy_table(mdp: FiniteMDP) -> np.ndarray:
    """[S, S, A] one-hot optimal policy for every target state"""
    return np.eye(mdp.n_actions)[mdp.optimal_actions()]


def epsilon_greedy(pi_star: np.ndarray, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must be in [0, 1], got {epsilon}")
    return (1.0 - epsilon) * pi_star + epsilon / pi_star.shape[-1]


def region_masked_expert(pi_star: np.ndarray, region: Iterable[int]) -> np.ndarray:
    """optimal inside region, uniform over the non-optimal actions elsewhere"""
    n_actions = pi_star.shape[-1]
    if n_actions < 2:
        raise ConfigError("region-masked behaviour needs at least two actions")
    inside = np.zeros(pi_star.shape[0], dtype=bool)
    inside[list(region)] = True
    outside = (1.0 - pi_star) / (n_actions - 1)
    return np.where(inside[:, None, None], pi_star, outside)


class OccupancyTable:
    values: np.ndarray
    gamma: float
    goals: np.ndarray

    def __init__(self, values: np.ndarray, gamma: float, goals: np.ndarray):
        self.values = values
        self.gamma = gamma
        self.goals = goals
        assert values.ndim == 3 and values.shape[2] == len(goals), (values.shape, len(goals))

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.values.shape}, gamma={self.gamma})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    def goal_mass(self) -> np.ndarray:
        return self.values.sum(axis=(0, 1))


def _initial_for(mdp: FiniteMDP, initial: Optional[np.ndarray], goals: np.ndarray) -> np.ndarray:
    if initial is None:
        return np.full((mdp.n_states, len(goals)), 1.0 / mdp.n_states)
    initial = np.asarray(initial, dtype=np.float64)
    if initial.ndim == 1:
        initial = np.repeat(initial[:, None], len(goals), axis=1)
    if initial.shape != (mdp.n_states, len(goals)):
        raise ShapeError(f"initial distribution shape {initial.shape} for {mdp.n_states} states, {len(goals)} goals")
    return initial


def _policy_for(mdp: FiniteMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_states, mdp.n_actions):
        raise ShapeError(
            f"policy must be [S, S, A] = {(mdp.n_states, mdp.n_states, mdp.n_actions)}, got {policy.shape}"
        )
    return policy


def occupancy(
    mdp: FiniteMDP,
    policy: np.ndarray,
    gamma: Optional[float] = None,
    goals: Optional[Sequence[int]] = None,
    initial: Optional[np.ndarray] = None,
) -> OccupancyTable:
    """
    exact discounted occupancy d(s, a | g) by one linear solve per goal

    policy is [S, S, A] indexed by target state; initial is a start
    distribution over states, shared or per goal
    """
    policy = _policy_for(mdp, policy)
    gamma = mdp.gamma if gamma is None else gamma
    goals = mdp.goals if goals is None else np.asarray(goals, dtype=np.int64)
    start = _initial_for(mdp, initial, goals)
    values = np.zeros((mdp.n_states, mdp.n_actions, len(goals)))
    identity = np.eye(mdp.n_states)
    for j, g in enumerate(goals):
        matrix = mdp.transition_matrix(policy[:, g, :], int(g))
        try:
            visits = np.linalg.solve((identity - gamma * matrix).T, (1.0 - gamma) * start[:, j])
        except np.linalg.LinAlgError as e:
            raise RuntimeError(f"occupancy system singular for goal {g} in {mdp.name}") from e
        values[:, :, j] = visits[:, None] * policy[:, g, :]
    return OccupancyTable(values, gamma, goals)


def occupancy_series(
    mdp: FiniteMDP,
    policy: np.ndarray,
    gamma: Optional[float] = None,
    goals: Optional[Sequence[int]] = None,
    initial: Optional[np.ndarray] = None,
    tol: float = 1e-12,
) -> OccupancyTable:
    """the same measure by summing the discounted series until gamma**t < tol"""
    policy = _policy_for(mdp, policy)
    gamma = mdp.gamma if gamma is None else gamma
    goals = mdp.goals if goals is None else np.asarray(goals, dtype=np.int64)
    start = _initial_for(mdp, initial, goals)
    values = np.zeros((mdp.n_states, mdp.n_actions, len(goals)))
    for j, g in enumerate(goals):
        matrix = mdp.transition_matrix(policy[:, g, :], int(g))
        marginal = start[:, j].copy()
        visits = np.zeros(mdp.n_states)
        weight = 1.0 - gamma
        discount = 1.0
        while True:
            visits += weight * marginal
            discount *= gamma
            weight *= gamma
            if discount < tol:
                break
            marginal = marginal @ matrix
        values[:, :, j] = visits[:, None] * policy[:, g, :]
    return OccupancyTable(values, gamma, goals)


def occupancy_monte_carlo(
    mdp: FiniteMDP,
    policy: np.ndarray,
    rng: np.random.Generator,
    gamma: Optional[float] = None,
    goals: Optional[Sequence[int]] = None,
    initial: Optional[np.ndarray] = None,
    samples: int = 10**6,
) -> OccupancyTable:
    """
    estimate by geometric stopping: run T ~ Geometric(1 - gamma) - 1 steps and
    record the (state, action) reached, vectorised over samples
    """
    policy = _policy_for(mdp, policy)
    gamma = mdp.gamma if gamma is None else gamma
    goals = mdp.goals if goals is None else np.asarray(goals, dtype=np.int64)
    start = _initial_for(mdp, initial, goals)
    values = np.zeros((mdp.n_states, mdp.n_actions, len(goals)))

    def draw_actions(states: np.ndarray, g: int) -> np.ndarray:
        cumulative = np.cumsum(policy[states, g, :], axis=1)
        u = rng.random((len(states), 1))
        return np.minimum((cumulative < u).sum(axis=1), mdp.n_actions - 1)

    for j, g in enumerate(goals):
        g = int(g)
        states = rng.choice(mdp.n_states, size=samples, p=start[:, j] / start[:, j].sum())
        if gamma > 0.0:
            remaining = rng.geometric(1.0 - gamma, size=samples) - 1
        else:
            remaining = np.zeros(samples, dtype=np.int64)
        active = remaining > 0
        while np.any(active):
            idx = np.flatnonzero(active)
            current = states[idx]
            actions = draw_actions(current, g)
            moved = mdp.next_state[current, actions]
            states[idx] = np.where(current == g, g, moved)
            remaining[idx] -= 1
            active = remaining > 0
        actions = draw_actions(states, g)
        np.add.at(values[:, :, j], (states, actions), 1.0 / samples)
    return OccupancyTable(values, gamma, goals)


def _values(table: Union[OccupancyTable, np.ndarray]) -> np.ndarray:
    return table.values if isinstance(table, OccupancyTable) else np.asarray(table)


def concentrability(
    d_star: Union[OccupancyTable, np.ndarray], d_bc: Union[OccupancyTable, np.ndarray]
) -> Tuple[float, Witness]:
    """
    sup of d_star / d_bc over the support of d_star, with the index attaining
    it; +inf with the first unsupported index on a support mismatch
    """
    star, bc = _values(d_star), _values(d_bc)
    if star.shape != bc.shape:
        raise ShapeError(f"occupancy shapes differ: {star.shape} vs {bc.shape}")
    support = star > 0.0
    if not np.any(support):
        return 0.0, None
    mismatch = support & (bc <= 0.0)
    if np.any(mismatch):
        witness = tuple(int(i) for i in np.argwhere(mismatch)[0])
        return math.inf, witness
    ratios = np.zeros_like(star)
    ratios[support] = star[support] / bc[support]
    flat = int(np.argmax(ratios))
    return float(ratios.reshape(-1)[flat]), tuple(int(i) for i in np.unravel_index(flat, star.shape))


def aggregate_table(values: np.ndarray, class_of: np.ndarray, n_classes: int) -> np.ndarray:
    """sum d[s, x, g] over each preimage of class_of[s, g], giving [C, X]"""
    if class_of.shape != (values.shape[0], values.shape[2]):
        raise ShapeError(f"class map {class_of.shape} does not cover table {values.shape}")
    out = np.zeros((n_classes, values.shape[1]))
    np.add.at(out, class_of, np.moveaxis(values, 1, -1))
    return out


class AbstractionMap:
    """
    phi_h[s, j] classes state / goal-set pairs, phi_l[s, w] classes state /
    waypoint pairs; ids are dense
    """

    phi_h: np.ndarray
    phi_l: np.ndarray
    name: str

    def __init__(self, phi_h: np.ndarray, phi_l: np.ndarray, name: str = "map"):
        self.phi_h = _dense(phi_h)
        self.phi_l = _dense(phi_l)
        self.name = name

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.name}, high={self.n_high}, low={self.n_low})"

    @property
    def n_high(self) -> int:
        return int(self.phi_h.max()) + 1

    @property
    def n_low(self) -> int:
        return int(self.phi_l.max()) + 1


def _dense(keys: np.ndarray) -> np.ndarray:
    """relabel class keys, scalar or row-vector valued, to 0..C-1"""
    keys = np.asarray(keys)
    if keys.ndim == 2:
        _, inverse = np.unique(keys.reshape(-1), return_inverse=True)
        return inverse.reshape(keys.shape).astype(np.int64)
    shape = keys.shape[:2]
    _, inverse = np.unique(keys.reshape(-1, keys.shape[-1]), axis=0, return_inverse=True)
    return inverse.reshape(shape).astype(np.int64)


def aggregate(d: OccupancyTable, amap: AbstractionMap, level: str) -> np.ndarray:
    if level == "high":
        return aggregate_table(d.values, amap.phi_h, amap.n_high)
    if level == "low":
        return aggregate_table(d.values, amap.phi_l, amap.n_low)
    raise ConfigError(f"unknown abstraction level {level}")


class HierarchyLift:
    """
    the n-step semi-MDP over options

    an option moves to a state at most n steps away, jumping there in one
    high-level step discounted by gamma**n. With coordinates the options are
    relative displacements, otherwise absolute target states
    """

    mdp: FiniteMDP
    n: int
    relative: bool
    displacements: Optional[np.ndarray]
    option_next: np.ndarray
    option_of: np.ndarray
    high_mdp: FiniteMDP
    waypoint_star: np.ndarray
    option_star: np.ndarray

    def __init__(self, mdp: FiniteMDP, n: int):
        if n < 1:
            raise ConfigError(f"n must be at least 1, got {n}")
        self.mdp = mdp
        self.n = n
        distances = mdp.distances()
        if np.any(distances < 0):
            s, w = (int(i) for i in np.argwhere(distances < 0)[0])
            raise UnreachableGoalError(f"{mdp.name}: state {w} unreachable from {s}", (s, w))
        near = distances <= n
        n_states = mdp.n_states

        self.relative = mdp.coords is not None
        if mdp.coords is not None:
            src, dst = np.nonzero(near)
            delta = mdp.coords[dst] - mdp.coords[src]
            self.displacements, codes = np.unique(delta, axis=0, return_inverse=True)
            self.option_of = np.full((n_states, n_states), -1, dtype=np.int64)
            self.option_of[src, dst] = codes.reshape(-1)
            self.option_next = np.repeat(np.arange(n_states)[:, None], len(self.displacements), axis=1)
            self.option_next[src, codes.reshape(-1)] = dst
        else:
            self.displacements = None
            self.option_of = np.where(near, np.arange(n_states)[None, :], -1)
            self.option_next = np.repeat(np.arange(n_states)[None, :], n_states, axis=0)
        self.high_mdp = FiniteMDP(self.option_next, mdp.goals, mdp.gamma**n, mdp.coords, f"{mdp.name}/high")

        actions = mdp.optimal_actions()
        current = np.repeat(np.arange(n_states)[:, None], mdp.n_goals, axis=1)
        goals = np.broadcast_to(mdp.goals[None, :], current.shape)
        for _ in range(n):
            moved = mdp.next_state[current, actions[current, goals]]
            current = np.where(current == goals, goals, moved)
        self.waypoint_star = current
        self.option_star = np.take_along_axis(self.option_of, current, axis=1)
        assert np.all(self.option_star >= 0), "optimal waypoint outside the option set"

    def __repr__(self) -> str:
        kind = "relative" if self.relative else "absolute"
        return f"{self.__class__.__name__}({self.mdp.name}, n={self.n}, {self.n_options} {kind} options)"

    @property
    def n_options(self) -> int:
        return int(self.option_next.shape[1])

    @property
    def gamma_h(self) -> float:
        return self.mdp.gamma**self.n

    @property
    def gamma_l(self) -> float:
        return 1.0 - 1.0 / self.n

    def high_policy(self, policy: np.ndarray) -> np.ndarray:
        """
        [S, S, K] option distribution induced by a flat policy: the option
        reaching the state found n steps later, absorbing at the goal
        """
        mdp = self.mdp
        policy = _policy_for(mdp, policy)
        table = np.zeros((mdp.n_states, mdp.n_states, self.n_options))
        for g in mdp.goals:
            reach = np.linalg.matrix_power(mdp.transition_matrix(policy[:, g, :], int(g)), self.n)
            src, dst = np.nonzero(reach > 0.0)
            assert np.all(self.option_of[src, dst] >= 0), "n-step successor outside the option set"
            slice_ = np.zeros((mdp.n_states, self.n_options))
            np.add.at(slice_, (src, self.option_of[src, dst]), reach[src, dst])
            table[:, g, :] = slice_
        return table

    def low_initial(self) -> np.ndarray:
        """[S, W] uniform start over states within n steps of each waypoint"""
        near = (self.mdp.distances() <= self.n).astype(np.float64)
        return near / near.sum(axis=0, keepdims=True)

    def option_counts(self, *tables: np.ndarray) -> Tuple[int, int]:
        """(relative, absolute) option counts used with positive mass by any table"""
        used = np.zeros((self.mdp.n_states, self.n_options), dtype=bool)
        for table in tables:
            used |= table[:, self.mdp.goals, :].sum(axis=1) > 0.0
        src, options = np.nonzero(used)
        absolute = len(set(self.option_next[src, options].tolist()))
        relative = len(set(options.tolist())) if self.relative else absolute
        return relative, absolute


def identity_map(lift: HierarchyLift) -> AbstractionMap:
    mdp = lift.mdp
    phi_h = np.arange(mdp.n_states * mdp.n_goals).reshape(mdp.n_states, mdp.n_goals)
    phi_l = np.arange(mdp.n_states * mdp.n_states).reshape(mdp.n_states, mdp.n_states)
    return AbstractionMap(phi_h, phi_l, "identity")


def optimal_option_map(lift: HierarchyLift) -> AbstractionMap:
    """the coarsest policy-respecting map: one class per optimal option or action"""
    return AbstractionMap(lift.option_star, lift.mdp.optimal_actions(), "optimal")


def displacement_map(lift: HierarchyLift, refine: bool = True) -> AbstractionMap:
    """
    classes keyed by the coordinate offset from state to goal (or waypoint),
    refined by the optimal option (or action) unless refine is off
    """
    mdp = lift.mdp
    if mdp.coords is None:
        raise ConfigError(f"{mdp.name} has no coordinates for a displacement map")
    to_goal = mdp.coords[mdp.goals][None, :, :] - mdp.coords[:, None, :]
    to_waypoint = mdp.coords[None, :, :] - mdp.coords[:, None, :]
    if refine:
        to_goal = np.concatenate([to_goal, lift.option_star[..., None]], axis=-1)
        to_waypoint = np.concatenate([to_waypoint, mdp.optimal_actions()[..., None]], axis=-1)
    name = "displacement_refined" if refine else "displacement"
    return AbstractionMap(to_goal, to_waypoint, name)


def check_policy_equivalence(amap: AbstractionMap, lift: HierarchyLift) -> None:
    """every class must share one optimal option (high) and one optimal action (low)"""
    mdp = lift.mdp
    if amap.phi_h.shape != (mdp.n_states, mdp.n_goals) or amap.phi_l.shape != (mdp.n_states, mdp.n_states):
        raise ShapeError(f"map {amap.name} does not cover {mdp.name}")
    levels = (
        ("high", amap.phi_h, lift.option_star, mdp.goals),
        ("low", amap.phi_l, mdp.optimal_actions(), np.arange(mdp.n_states)),
    )
    for level, classes, choice, targets in levels:
        first: Dict[int, Tuple[int, int]] = {}
        for (s, j), c in np.ndenumerate(classes):
            s0, j0 = first.setdefault(int(c), (s, j))
            if choice[s, j] != choice[s0, j0]:
                witness = ((s0, int(targets[j0])), (s, int(targets[j])))
                raise PolicyEquivalenceError(
                    f"map {amap.name} joins {witness[0]} and {witness[1]} at the {level} level "
                    f"with different optimal choices",
                    witness,
                )


def sample_complexity_terms(
    n_states: int,
    n_goals: int,
    n_actions: int,
    n_options: int,
    gamma: float,
    n: int,
    n_classes_high: Optional[int] = None,
    n_classes_low: Optional[int] = None,
) -> Dict[str, float]:
    """cardinality and horizon products of the bound terms, without concentrability"""
    horizon = 1.0 / (1.0 - gamma) ** 3
    horizon_h = 1.0 / (1.0 - gamma**n) ** 3
    terms = {
        "flat": n_states * n_goals * n_actions * horizon,
        "high": n_states * n_goals * n_options * horizon_h,
        "low": n_states * n_options * n_actions * float(n) ** 3,
        # reported only: options as raw action sequences
        "misspecified_high": n_states * n_goals * float(n_actions) ** n * horizon_h,
    }
    if n_classes_high is not None:
        terms["abstract_high"] = n_classes_high * n_options * horizon_h
    if n_classes_low is not None:
        terms["abstract_low"] = n_classes_low * n_actions * float(n) ** 3
    return terms


def _ratio(a: float, b: float) -> float:
    if math.isinf(b):
        return 0.0 if math.isfinite(a) else 1.0
    return a / b if b > 0 else math.inf


@dataclass
class OrderingReport:
    name: str
    map_name: str
    n_states: int
    n_actions: int
    n_goals: int
    n_options: int
    n: int
    gamma: float
    gamma_h: float
    gamma_l: float
    kappa: float
    kappa_h: float
    kappa_l: float
    kappa_rep_h: float
    kappa_rep_l: float
    identity_kappa_rep_h: float
    identity_kappa_rep_l: float
    n_classes_high: int
    n_classes_low: int
    omega_rel: int
    omega_abs: int
    error_flat: float
    error_hier: float
    error_rep: float
    ratio_hier: float
    ratio_rep: float
    horizon_ok: bool
    cardinality_ok: bool
    options_ok: bool
    concentrability_ok: bool
    terms: Dict[str, float] = field(default_factory=dict)
    witnesses: Dict[str, Witness] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return self.horizon_ok and self.cardinality_ok and self.options_ok and self.concentrability_ok

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["all_passed"] = self.all_passed
        record["witnesses"] = {k: list(v) if v is not None else None for k, v in self.witnesses.items()}
        return record


CSV_COLUMNS = [
    "name",
    "map_name",
    "n_states",
    "n",
    "kappa",
    "kappa_h",
    "kappa_rep_h",
    "kappa_l",
    "kappa_rep_l",
    "identity_kappa_rep_h",
    "identity_kappa_rep_l",
    "ratio_hier",
    "ratio_rep",
    "horizon_ok",
    "cardinality_ok",
    "options_ok",
    "concentrability_ok",
    "all_passed",
]


def verify_orderings(
    mdp: FiniteMDP,
    behaviour: np.ndarray,
    amap: AbstractionMap,
    n: int,
    lift: Optional[HierarchyLift] = None,
) -> OrderingReport:
    """
    check the four ways hierarchy and abstraction shrink the offline error
    bound, for a behaviour policy [S, S, A] and a policy-respecting map
    """
    lift = lift if lift is not None else HierarchyLift(mdp, n)
    assert lift.mdp is mdp and lift.n == n, (lift, mdp, n)
    check_policy_equivalence(amap, lift)
    pi_star = optimal_policy_table(mdp)
    witnesses: Dict[str, Witness] = {}

    kappa, witnesses["flat"] = concentrability(occupancy(mdp, pi_star), occupancy(mdp, behaviour))

    high_star, high_bc = lift.high_policy(pi_star), lift.high_policy(behaviour)
    d_h_star = occupancy(lift.high_mdp, high_star)
    d_h_bc = occupancy(lift.high_mdp, high_bc)
    kappa_h, witnesses["high"] = concentrability(d_h_star, d_h_bc)
    kappa_rep_h, witnesses["high_rep"] = concentrability(
        aggregate(d_h_star, amap, "high"), aggregate(d_h_bc, amap, "high")
    )

    waypoints = np.arange(mdp.n_states)
    initial = lift.low_initial()
    d_l_star = occupancy(mdp, pi_star, lift.gamma_l, waypoints, initial)
    d_l_bc = occupancy(mdp, behaviour, lift.gamma_l, waypoints, initial)
    kappa_l, witnesses["low"] = concentrability(d_l_star, d_l_bc)
    kappa_rep_l, witnesses["low_rep"] = concentrability(
        aggregate(d_l_star, amap, "low"), aggregate(d_l_bc, amap, "low")
    )

    control = identity_map(lift)
    identity_h, _ = concentrability(aggregate(d_h_star, control, "high"), aggregate(d_h_bc, control, "high"))
    identity_l, _ = concentrability(aggregate(d_l_star, control, "low"), aggregate(d_l_bc, control, "low"))

    terms = sample_complexity_terms(
        mdp.n_states, mdp.n_goals, mdp.n_actions, lift.n_options, mdp.gamma, n,
        amap.n_high, amap.n_low,
    )
    error_flat = math.sqrt(terms["flat"] * kappa)
    error_hier = math.sqrt(terms["high"] * kappa_h) + math.sqrt(terms["low"] * kappa_l)
    error_rep = math.sqrt(terms["abstract_high"] * kappa_rep_h) + math.sqrt(terms["abstract_low"] * kappa_rep_l)
    omega_rel, omega_abs = lift.option_counts(high_star, high_bc)

    report = OrderingReport(
        name=mdp.name,
        map_name=amap.name,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        n_goals=mdp.n_goals,
        n_options=lift.n_options,
        n=n,
        gamma=mdp.gamma,
        gamma_h=lift.gamma_h,
        gamma_l=lift.gamma_l,
        kappa=kappa,
        kappa_h=kappa_h,
        kappa_l=kappa_l,
        kappa_rep_h=kappa_rep_h,
        kappa_rep_l=kappa_rep_l,
        identity_kappa_rep_h=identity_h,
        identity_kappa_rep_l=identity_l,
        n_classes_high=amap.n_high,
        n_classes_low=amap.n_low,
        omega_rel=omega_rel,
        omega_abs=omega_abs,
        error_flat=error_flat,
        error_hier=error_hier,
        error_rep=error_rep,
        ratio_hier=_ratio(error_hier, error_flat),
        ratio_rep=_ratio(error_rep, error_flat),
        horizon_ok=1.0 / (1.0 - lift.gamma_h) ** 3 <= 1.0 / (1.0 - mdp.gamma) ** 3,
        cardinality_ok=(
            amap.n_high <= mdp.n_states * mdp.n_goals and amap.n_low <= mdp.n_states * mdp.n_states
        ),
        options_ok=omega_rel <= omega_abs,
        concentrability_ok=(
            kappa_rep_h <= kappa_h * RATIO_TOLERANCE and kappa_rep_l <= kappa_l * RATIO_TOLERANCE
        ),
        terms=terms,
        witnesses=witnesses,
    )
    if not report.all_passed:
        logger.warning(f"{mdp.name} with {amap.name}: ordering checks failed {report.to_record()}")
    return report


def random_gridmaze(
    rng: np.random.Generator,
    size: int = 5,
    min_free: int = 13,
    max_free: int = 25,
    gamma: float = 0.99,
    name: str = "gridmaze",
    attempts: int = 1000,
) -> FiniteMDP:
    """random walls on a size x size grid, keeping the largest connected region"""
    for _ in range(attempts):
        walls = rng.random((size, size)) < rng.uniform(0.0, 0.45)
        best = np.zeros_like(walls)
        seen = np.zeros_like(walls)
        for cell in zip(*np.nonzero(~walls)):
            if seen[cell]:
                continue
            region = flood_fill(walls, (int(cell[0]), int(cell[1]))) >= 0
            seen |= region
            if region.sum() > best.sum():
                best = region
        if min_free <= best.sum() <= max_free:
            cells = [(int(r), int(c)) for r, c in zip(*np.nonzero(best))]
            index = {cell: i for i, cell in enumerate(cells)}
            next_state = np.array(
                [[index.get((r + int(dr), c + int(dc)), i) for dr, dc in MOVES] for i, (r, c) in enumerate(cells)]
            )
            return FiniteMDP(next_state, None, gamma, np.array(cells), name)
    raise RuntimeError(f"no gridmaze with {min_free}..{max_free} free cells in {attempts} attempts")


def ring_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.99, name: str = "ring") -> FiniteMDP:
    """action 0 steps around a ring, the others jump to random states"""
    if n_states < 2 or n_actions < 2:
        raise ConfigError(f"ring needs at least two states and actions, got {n_states}, {n_actions}")
    next_state = rng.integers(0, n_states, size=(n_states, n_actions))
    next_state[:, 0] = (np.arange(n_states) + 1) % n_states
    return FiniteMDP(next_state, None, gamma, None, name)


def fourrooms_mdp(gamma: float = 0.99) -> FiniteMDP:
    return FiniteMDP.from_maze(load_maze("fourrooms"), gamma)


def room_region(mdp: FiniteMDP, rows: Tuple[int, int], cols: Tuple[int, int]) -> List[int]:
    """states whose coordinates fall inside the half-open row and column ranges"""
    assert mdp.coords is not None, mdp
    r, c = mdp.coords[:, 0], mdp.coords[:, 1]
    inside = (rows[0] <= r) & (r < rows[1]) & (cols[0] <= c) & (c < cols[1])
    return np.flatnonzero(inside).tolist()


def run_sweep(
    instances: int,
    max_states: int,
    seed: int,
    n: int = 2,
    gamma: float = 0.99,
    epsilon: float = 0.2,
) -> List[OrderingReport]:
    """
    alternate random gridmazes and ring MDPs, with epsilon-greedy and
    region-masked behaviours, under policy-respecting maps
    """
    if max_states < 2:
        raise ConfigError(f"max_states must be at least 2, got {max_states}")
    reports = []
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if i % 2 == 0 and max_states >= 4:
            mdp = random_gridmaze(
                rng, min_free=min(13, max_states), max_free=min(25, max_states), gamma=gamma, name=f"gridmaze{i}"
            )
        else:
            mdp = ring_mdp(
                rng, int(rng.integers(2, max_states + 1)), int(rng.integers(2, 5)), gamma, name=f"ring{i}"
            )
        lift = HierarchyLift(mdp, n)
        amap = displacement_map(lift) if mdp.coords is not None else optimal_option_map(lift)
        pi_star = optimal_policy_table(mdp)
        if (i // 2) % 2 == 0:
            behaviour = epsilon_greedy(pi_star, epsilon)
        else:
            region = rng.permutation(mdp.n_states)[: max(1, mdp.n_states // 2)]
            behaviour = region_masked_expert(pi_star, region)
        report = verify_orderings(mdp, behaviour, amap, n, lift)
        logger.info(
            f"{mdp.name}: kappa {report.kappa:.4g}, high {report.kappa_rep_h:.4g}/{report.kappa_h:.4g}, "
            f"low {report.kappa_rep_l:.4g}/{report.kappa_l:.4g}, passed {report.all_passed}"
        )
        reports.append(report)
    return reports


def write_report_records(outfile: TextIO, reports: Iterable[OrderingReport]) -> None:
    for report in reports:
        outfile.write(json.dumps(report.to_record(), sort_keys=True) + "\n")


def write_report_csv(outfile: TextIO, reports: Iterable[OrderingReport]) -> None:
    writer = csv.writer(outfile, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        record = report.to_record()
        writer.writerow([record[key] for key in CSV_COLUMNS])
