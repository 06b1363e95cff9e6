"""
Offline datasets and goal sampling
----------------------------------

A ``Dataset`` holds N trajectories of exactly H transitions as dense arrays,
states shaped (N, H + 1, state_dim) and actions shaped (N, H, action_dim).

Training batches draw (trajectory, step) pairs uniformly with replacement,
attach the waypoint n steps ahead (clamped at the trajectory end) and a goal
drawn from a mixture of the current state, a future state of the same
trajectory, and a uniformly random dataset state. Rewards are relabelled with
the environment goal test.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, TextIO, Tuple

import numpy as np
from typing_extensions import Self

from .config import read_config_lines
from .container import FileLike, read_container, write_container
from .envs import reward_batch
from .errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

# goal provenance tags
CUR, TRAJ, RAND = 0, 1, 2


class Dataset:
    states: np.ndarray
    actions: np.ndarray
    env_id: str
    goal_radius: float
    discrete: bool
    style: str
    seed: int
    noise: float

    def __init__(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        env_id: str = "",
        goal_radius: float = 0.0,
        discrete: bool = False,
        style: str = "",
        seed: int = 0,
        noise: float = 0.0,
    ):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if states.ndim != 3 or actions.ndim != 3:
            raise ConfigError(f"dataset arrays must be 3-d, got {states.shape} and {actions.shape}")
        if states.shape[0] != actions.shape[0] or states.shape[1] != actions.shape[1] + 1:
            raise ConfigError(
                f"dataset needs H + 1 states per H actions, got {states.shape} and {actions.shape}"
            )
        if actions.shape[0] < 1 or actions.shape[1] < 1:
            raise ConfigError("dataset is empty")
        self.states = states
        self.actions = actions
        self.env_id = env_id
        self.goal_radius = float(goal_radius)
        self.discrete = discrete
        self.style = style
        self.seed = seed
        self.noise = float(noise)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.env_id}, N={self.n_trajectories}, H={self.horizon})"

    @property
    def n_trajectories(self) -> int:
        return int(self.actions.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[1])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[2])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[2])

    @property
    def n_transitions(self) -> int:
        return self.n_trajectories * self.horizon

    def flat_index(self) -> np.ndarray:
        """(trajectory, step) for every transition, trajectory-major"""
        traj, step = np.divmod(np.arange(self.n_transitions), self.horizon)
        return np.stack([traj, step], axis=1)

    def trajectory(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.states[i], self.actions[i]

    def translated(self, offset: np.ndarray) -> "Dataset":
        """copy with every state shifted by offset"""
        return Dataset(
            self.states + np.asarray(offset, dtype=np.float64),
            self.actions.copy(),
            self.env_id,
            self.goal_radius,
            self.discrete,
            self.style,
            self.seed,
            self.noise,
        )

    def header_text(self) -> str:
        fields = {
            "dataset.action_dim": self.action_dim,
            "dataset.h": self.horizon,
            "dataset.n": self.n_trajectories,
            "dataset.noise": repr(self.noise),
            "dataset.seed": self.seed,
            "dataset.state_dim": self.state_dim,
            "dataset.style": self.style,
            "env.discrete": "true" if self.discrete else "false",
            "env.goal_radius": repr(self.goal_radius),
            "env.id": self.env_id,
        }
        return "".join(f"{key} = {value}\n" for key, value in sorted(fields.items()))

    def write_to(self, outfile: FileLike) -> None:
        write_container(
            outfile, self.header_text(), {"actions": self.actions, "states": self.states}
        )

    @classmethod
    def from_stream(cls, infile: FileLike) -> Self:
        header, records = read_container(infile)
        fields: Dict[str, str] = {key: value for _, key, value in read_config_lines(header.splitlines())}
        try:
            states, actions = records["states"], records["actions"]
            n, h = int(fields["dataset.n"]), int(fields["dataset.h"])
        except KeyError as e:
            raise RuntimeError(f"invalid dataset file, missing {e}")
        if states.shape[:2] != (n, h + 1) or actions.shape[:2] != (n, h):
            raise RuntimeError(f"invalid dataset file, shapes {states.shape} {actions.shape} for N={n} H={h}")
        return cls(
            states,
            actions,
            env_id=fields.get("env.id", ""),
            goal_radius=float(fields.get("env.goal_radius", 0.0)),
            discrete=fields.get("env.discrete", "false") == "true",
            style=fields.get("dataset.style", ""),
            seed=int(fields.get("dataset.seed", 0)),
            noise=float(fields.get("dataset.noise", 0.0)),
        )

    @classmethod
    def from_file(cls, path: str) -> Self:
        with open(path, "rb") as infile:
            return cls.from_stream(infile)

    def write_csv(self, outfile: TextIO) -> None:
        """one row per state; the final state of a trajectory has empty action cells"""
        writer = csv.writer(outfile, lineterminator="\n")
        writer.writerow(
            ["traj", "step"]
            + [f"s{i}" for i in range(self.state_dim)]
            + [f"a{i}" for i in range(self.action_dim)]
        )
        empty = [""] * self.action_dim
        for i in range(self.n_trajectories):
            for t in range(self.horizon + 1):
                action = [repr(float(x)) for x in self.actions[i, t]] if t < self.horizon else empty
                writer.writerow([i, t] + [repr(float(x)) for x in self.states[i, t]] + action)


@dataclass(frozen=True)
class GoalSampleConfig:
    p_cur: float
    p_traj: float
    p_rand: float
    geometric: bool
    discount: float

    def __post_init__(self) -> None:
        probabilities = (self.p_cur, self.p_traj, self.p_rand)
        if min(probabilities) < 0.0:
            raise ConfigError(f"goal probabilities must be non-negative, got {probabilities}")
        if abs(sum(probabilities) - 1.0) > 1e-12:
            raise ConfigError(f"goal probabilities must sum to 1, got {probabilities}")
        if not 0.0 < self.discount < 1.0:
            raise ConfigError(f"goal discount must be in (0, 1), got {self.discount}")


def value_config(discount: float) -> GoalSampleConfig:
    """flat IQL value and critic goals"""
    return GoalSampleConfig(0.2, 0.5, 0.3, False, discount)


def low_value_config(discount: float) -> GoalSampleConfig:
    return GoalSampleConfig(0.10, 0.85, 0.05, True, discount)


def high_value_config(discount: float) -> GoalSampleConfig:
    return GoalSampleConfig(0.2, 0.5, 0.3, False, discount)


def policy_config(discount: float) -> GoalSampleConfig:
    return GoalSampleConfig(0.0, 0.5, 0.5, True, discount)


def waypoint_index(t: Any, n: int, horizon: int) -> Any:
    return np.minimum(np.asarray(t) + n, horizon)


def sample_waypoint(traj: np.ndarray, t: int, n: int) -> np.ndarray:
    """state n steps after t on the same trajectory, clamped at its end"""
    horizon = len(traj) - 1
    assert 0 <= t <= horizon, f"step {t} outside trajectory of {horizon} transitions"
    return traj[int(waypoint_index(t, n, horizon))]


def future_offsets(remaining: np.ndarray, cfg: GoalSampleConfig, rng: np.random.Generator) -> np.ndarray:
    """
    offsets in [1, remaining] per row, zero where nothing remains

    geometric offsets follow P(k) proportional to discount**(k - 1), truncated and
    renormalised over the remaining steps, drawn by inverting the truncated CDF
    """
    remaining = np.asarray(remaining, dtype=np.int64)
    u = rng.random(remaining.shape)
    if cfg.geometric:
        mass = 1.0 - cfg.discount ** remaining
        k = np.ceil(np.log1p(-u * mass) / np.log(cfg.discount))
    else:
        k = 1.0 + np.floor(u * remaining)
    k = np.clip(k, 1, np.maximum(remaining, 1)).astype(np.int64)
    return np.where(remaining > 0, k, 0)


def sample_goal_indices(
    dataset: Dataset,
    traj: np.ndarray,
    t: np.ndarray,
    cfg: GoalSampleConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(goal trajectory, goal step, provenance) for every anchor row"""
    traj = np.asarray(traj, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    count = traj.shape[0]
    horizon = dataset.horizon

    # every draw happens for every row, keeping the stream position independent of outcomes
    u = rng.random(count)
    offsets = future_offsets(horizon - t, cfg, rng)
    random_flat = rng.integers(dataset.n_trajectories * (horizon + 1), size=count)

    provenance = np.where(u < cfg.p_cur, CUR, np.where(u < cfg.p_cur + cfg.p_traj, TRAJ, RAND))
    random_traj, random_step = np.divmod(random_flat, horizon + 1)
    goal_traj = np.where(provenance == RAND, random_traj, traj)
    goal_step = np.where(
        provenance == CUR, t, np.where(provenance == TRAJ, t + offsets, random_step)
    )
    return goal_traj, goal_step, provenance


def sample_goal(
    dataset: Dataset, traj: int, t: int, cfg: GoalSampleConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, int]:
    goal_traj, goal_step, provenance = sample_goal_indices(
        dataset, np.array([traj]), np.array([t]), cfg, rng
    )
    return dataset.states[goal_traj[0], goal_step[0]], int(provenance[0])


def relabel_reward(s: np.ndarray, g: np.ndarray, goal_radius: float) -> Any:
    """0 where the environment goal test fires for goal g, -1 elsewhere"""
    rewards = reward_batch(s, g, goal_radius)
    return float(rewards) if np.ndim(rewards) == 0 else rewards


class SampledBatch:
    """
    one training batch; waypoints are n steps ahead of the anchor, goals come
    from the requested mixture, rewards are r(s, goal) and r(s, waypoint)
    """

    observations: np.ndarray
    actions: np.ndarray
    next_observations: np.ndarray
    waypoints: np.ndarray
    goals: np.ndarray
    rewards: np.ndarray
    waypoint_rewards: np.ndarray
    provenance: np.ndarray
    traj_idx: np.ndarray
    step_idx: np.ndarray
    waypoint_step: np.ndarray
    goal_traj: np.ndarray
    goal_step: np.ndarray

    def __init__(self, **fields: np.ndarray):
        for key, value in fields.items():
            if key not in self.__annotations__:
                raise TypeError(f"unexpected batch field {key}")
            setattr(self, key, value)
        missing = set(self.__annotations__) - set(fields)
        assert not missing, f"batch fields missing: {sorted(missing)}"

    def __len__(self) -> int:
        return int(self.observations.shape[0])

    @classmethod
    def from_transitions(
        cls,
        observations: np.ndarray,
        actions: np.ndarray,
        next_observations: np.ndarray,
        waypoints: np.ndarray,
        goals: np.ndarray,
        goal_radius: float = 0.0,
    ) -> Self:
        """batch from explicit rows, as used for exhaustive updates"""
        count = len(observations)
        unknown = np.full(count, -1, dtype=np.int64)
        return cls(
            observations=np.asarray(observations, dtype=np.float64),
            actions=np.asarray(actions, dtype=np.float64),
            next_observations=np.asarray(next_observations, dtype=np.float64),
            waypoints=np.asarray(waypoints, dtype=np.float64),
            goals=np.asarray(goals, dtype=np.float64),
            rewards=reward_batch(observations, goals, goal_radius),
            waypoint_rewards=reward_batch(observations, waypoints, goal_radius),
            provenance=unknown,
            traj_idx=unknown,
            step_idx=unknown,
            waypoint_step=unknown,
            goal_traj=unknown,
            goal_step=unknown,
        )


def sample_batch(
    dataset: Dataset,
    batch_size: int,
    cfg: GoalSampleConfig,
    n: int,
    rng: np.random.Generator,
    goal_radius: Optional[float] = None,
) -> SampledBatch:
    if batch_size < 1:
        raise UsageError(f"batch_size must be positive, got {batch_size}")
    radius = dataset.goal_radius if goal_radius is None else goal_radius

    traj = rng.integers(dataset.n_trajectories, size=batch_size)
    t = rng.integers(dataset.horizon, size=batch_size)
    wstep = waypoint_index(t, n, dataset.horizon)
    goal_traj, goal_step, provenance = sample_goal_indices(dataset, traj, t, cfg, rng)

    observations = dataset.states[traj, t]
    waypoints = dataset.states[traj, wstep]
    goals = dataset.states[goal_traj, goal_step]
    return SampledBatch(
        observations=observations,
        actions=dataset.actions[traj, t],
        next_observations=dataset.states[traj, t + 1],
        waypoints=waypoints,
        goals=goals,
        rewards=reward_batch(observations, goals, radius),
        waypoint_rewards=reward_batch(observations, waypoints, radius),
        provenance=provenance,
        traj_idx=traj,
        step_idx=t,
        waypoint_step=wstep,
        goal_traj=goal_traj,
        goal_step=goal_step,
    )
