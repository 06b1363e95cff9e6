"""
Experiment orchestration: training across variants and seeds, binary success
evaluation with bootstrapped confidence intervals, and value-grid dumps.

An episode succeeds when the goal test fires at any step, step 0 included.
Starts are drawn uniformly from the start region with a stream reserved for
that, so deterministic evaluation depends only on (agent, env, goal, start).
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    TextIO,
    Tuple,
)

import numpy as np
from typing_extensions import Protocol

from .agents import Agent, AgentSpec, train, value_estimate, write_metrics
from .data import Dataset
from .envs import Cell, EnvState, GoalTest, MazeSpec, generate_dataset, load_maze, step
from .errors import ConfigError, UnreachableGoalError, UnsupportedEnvironmentError, UsageError
from .mp import run_pool

logger = logging.getLogger(__name__)

STEP_BUDGET_FACTOR = 4
CHECKPOINT_NAME = "agent.parl"
METRICS_NAME = "metrics.jsonl"


class Actor(Protocol):
    def act(
        self,
        s: np.ndarray,
        g: np.ndarray,
        deterministic: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        ...


@dataclass
class EvalResult:
    variant: str
    seed: int
    goals: List[Cell]
    episodes: int
    successes: List[int]
    steps: List[List[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        assert len(self.goals) == len(self.successes), (self.goals, self.successes)
        for count in self.successes:
            assert 0 <= count <= self.episodes, (count, self.episodes)

    @property
    def rates(self) -> List[float]:
        return [count / self.episodes for count in self.successes]

    @property
    def mean(self) -> float:
        """mean of the per-goal success rates"""
        return float(np.mean(self.rates))

    def outcomes(self) -> np.ndarray:
        """binary outcomes of every episode, goal by goal"""
        flags = []
        for count in self.successes:
            flags += [1.0] * count + [0.0] * (self.episodes - count)
        return np.array(flags)


def evaluate(
    agent: Actor,
    spec: MazeSpec,
    goals: Sequence[Cell],
    episodes: int,
    max_steps: Optional[int] = None,
    seed: int = 0,
    deterministic: bool = True,
    variant: str = "",
    run_seed: int = 0,
) -> EvalResult:
    """
    roll the policy from sampled starts until the goal test fires or the step
    budget runs out; the budget defaults to four times the optimal path length
    """
    if episodes < 1:
        raise UsageError(f"need at least one episode, got {episodes}")
    starts_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    act_rng = None if deterministic else np.random.default_rng(np.random.SeedSequence([seed, 3]))
    region = spec.start_region
    successes: List[int] = []
    steps_taken: List[List[int]] = []
    for goal_cell in goals:
        goal_cell = (int(goal_cell[0]), int(goal_cell[1]))
        goal = spec.position_of(goal_cell)
        test = GoalTest.for_spec(spec, goal)
        starts = [region[int(i)] for i in starts_rng.integers(len(region), size=episodes)]
        count = 0
        lengths = []
        for start in starts:
            state = EnvState(spec.position_of(start))
            optimal = spec.optimal_steps(state.position, goal)
            if optimal < 0:
                raise UnreachableGoalError(f"goal {goal_cell} unreachable from {start}", (start, goal_cell))
            budget = max_steps if max_steps is not None else STEP_BUDGET_FACTOR * optimal
            reached = test.reached(state.position)
            while not reached and state.steps < budget:
                action = agent.act(state.position, goal, deterministic, act_rng)
                state = step(spec, state, action, act_rng)
                reached = test.reached(state.position)
            count += int(reached)
            lengths.append(state.steps if reached else -1)
        successes.append(count)
        steps_taken.append(lengths)
        logger.debug(f"{variant} seed {run_seed} goal {goal_cell}: {count}/{episodes}")
    return EvalResult(variant, run_seed, list(goals), episodes, successes, steps_taken)


def bootstrap_ci(
    groups: Sequence[Sequence[float]],
    resamples: int = 10000,
    level: float = 0.95,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """percentile bootstrap over group means; the interval always holds the mean"""
    if not groups or any(len(g) == 0 for g in groups):
        raise UsageError("bootstrap needs at least one non-empty group")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must be in (0, 1), got {level}")
    if resamples < 1:
        raise ConfigError(f"need at least one resample, got {resamples}")
    rng = rng if rng is not None else np.random.default_rng(0)
    means = np.array([np.mean(g) for g in groups])
    centre = float(means.mean())
    draws = rng.integers(0, len(means), size=(resamples, len(means)))
    boot = means[draws].mean(axis=1)
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(boot, [tail, 1.0 - tail])
    return min(float(low), centre), max(float(high), centre)


def aggregate_results(
    results: Iterable[EvalResult], resamples: int = 10000, level: float = 0.95, seed: int = 0
) -> List[Dict[str, Any]]:
    """one row per variant: mean of per-goal means and a CI over seed means"""
    by_variant: Dict[str, List[EvalResult]] = {}
    for result in results:
        by_variant.setdefault(result.variant, []).append(result)
    rows = []
    for variant in sorted(by_variant):
        runs = sorted(by_variant[variant], key=lambda r: r.seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        low, high = bootstrap_ci([r.rates for r in runs], resamples, level, rng)
        mean = float(np.mean([rate for r in runs for rate in r.rates]))
        rows.append({"variant": variant, "mean": mean, "ci_low": low, "ci_high": high})
    return rows


def format_cell(cell: Cell) -> str:
    return f"{cell[0]}:{cell[1]}"


def write_results_csv(outfile: TextIO, results: Iterable[EvalResult]) -> None:
    writer = csv.writer(outfile, lineterminator="\n")
    writer.writerow(["variant", "seed", "goal", "successes", "episodes", "rate"])
    for result in sorted(results, key=lambda r: (r.variant, r.seed)):
        for goal, count, rate in zip(result.goals, result.successes, result.rates):
            writer.writerow([result.variant, result.seed, format_cell(goal), count, result.episodes, repr(rate)])


def write_aggregate_csv(outfile: TextIO, rows: Iterable[Mapping[str, Any]]) -> None:
    writer = csv.writer(outfile, lineterminator="\n")
    writer.writerow(["variant", "mean", "ci_low", "ci_high"])
    for row in rows:
        writer.writerow([row["variant"], repr(row["mean"]), repr(row["ci_low"]), repr(row["ci_high"])])


@dataclass
class ValueGrid:
    level: str
    goal: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    gradient: np.ndarray

    @property
    def resolution(self) -> Tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])


def grid_points(spec: MazeSpec, resolution: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """cell-centred sample coordinates covering the whole maze"""
    n_rows, n_cols = resolution
    height, width = spec.shape
    if spec.continuous:
        rows = (np.arange(n_rows) + 0.5) / n_rows * height * spec.cell_size
        cols = (np.arange(n_cols) + 0.5) / n_cols * width * spec.cell_size
    else:
        rows = (np.arange(n_rows) + 0.5) / n_rows * height - 0.5
        cols = (np.arange(n_cols) + 0.5) / n_cols * width - 0.5
    return rows, cols


def dump_value_grid(
    agent: Agent,
    spec: MazeSpec,
    goal: np.ndarray,
    resolution: Tuple[int, int] = (30, 30),
    level: str = "low",
) -> ValueGrid:
    """
    V_l(s, g_s) (level low, goal read as the waypoint) or V_h(s, g) over free
    space, with a central-difference gradient magnitude; NaN marks walls and
    points with a wall neighbour in the gradient grid
    """
    if spec.state_dim != 2 or agent.spec.state_dim != 2:
        raise UnsupportedEnvironmentError(f"value grids need 2-D positions, got {agent.spec.state_dim}")
    if min(resolution) < 1:
        raise ConfigError(f"invalid grid resolution {resolution}")
    rows, cols = grid_points(spec, resolution)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    points = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)
    free = np.array([spec.is_free_position(p) for p in points])
    values = np.full(len(points), np.nan)
    if np.any(free):
        values[free] = value_estimate(agent, points[free], np.asarray(goal, dtype=np.float64), level)
    values = values.reshape(resolution)

    gradient = np.full(resolution, np.nan)
    if resolution[0] >= 3 and resolution[1] >= 3:
        d_row = (values[2:, 1:-1] - values[:-2, 1:-1]) / (2.0 * (rows[1] - rows[0]))
        d_col = (values[1:-1, 2:] - values[1:-1, :-2]) / (2.0 * (cols[1] - cols[0]))
        # NaN propagates from any wall neighbour
        gradient[1:-1, 1:-1] = np.sqrt(d_row**2 + d_col**2)
    return ValueGrid(level, np.asarray(goal, dtype=np.float64), rows, cols, values, gradient)


def write_grid_csv(outfile: TextIO, grid: ValueGrid, table: np.ndarray, kind: str) -> None:
    outfile.write(
        f"# kind={kind} level={grid.level} goal={','.join(repr(float(x)) for x in grid.goal)} "
        f"resolution={grid.resolution[0]},{grid.resolution[1]}\n"
    )
    writer = csv.writer(outfile, lineterminator="\n")
    for row in table:
        writer.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])


@dataclass
class ExperimentPlan:
    env_id: str
    specs: List[AgentSpec]
    seeds: List[int]
    steps: int
    episodes: int
    goals: List[Cell]
    env_file: Optional[str] = None
    style: str = "stitch"
    n_trajectories: int = 2000
    horizon: int = 50
    noise: float = 0.2
    dataset_seed: int = 0
    log_interval: int = 1000
    eval_seed: int = 0
    max_steps: Optional[int] = None
    resamples: int = 10000
    level: float = 0.95

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        if not self.specs:
            raise ConfigError("an experiment needs at least one agent")
        maze = self.maze()
        for goal in self.goals:
            for start in maze.start_region:
                if maze.distance(start, goal) < 0:
                    raise UnreachableGoalError(f"goal {goal} unreachable from {start}", (start, goal))

    def maze(self) -> MazeSpec:
        return load_maze(self.env_id, self.env_file)

    def dataset(self) -> Dataset:
        return generate_dataset(
            self.maze(), self.style, self.n_trajectories, self.horizon, self.noise, self.dataset_seed
        )


def run_single(
    spec: AgentSpec,
    seed: int,
    dataset: Dataset,
    steps: int,
    log_interval: int,
    run_dir: Optional[str] = None,
) -> Dict[str, Any]:
    """train one (variant, seed) and optionally save checkpoint and metrics under run_dir"""
    agent, metrics = train(spec, dataset, steps, seed, log_interval)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, CHECKPOINT_NAME), "wb") as outfile:
            agent.write_to(outfile)
        with open(os.path.join(run_dir, METRICS_NAME), "w") as outfile:
            write_metrics(outfile, metrics)
    return {"agent": agent, "metrics": metrics}


def _plan_run(plan: ExperimentPlan, spec: AgentSpec, seed: int, dataset: Dataset) -> EvalResult:
    agent = run_single(spec, seed, dataset, plan.steps, plan.log_interval)["agent"]
    return evaluate(
        agent,
        plan.maze(),
        plan.goals,
        plan.episodes,
        plan.max_steps,
        plan.eval_seed,
        True,
        spec.variant,
        seed,
    )


def run_plan(plan: ExperimentPlan, jobs: int = 1, out_dir: Optional[str] = None) -> List[EvalResult]:
    """
    train and evaluate every (variant, seed) pair, sorted by variant then seed;
    with out_dir, also write results.csv and aggregate.csv there
    """
    dataset = plan.dataset()
    kwargss = [
        {"plan": plan, "spec": spec, "seed": seed, "dataset": dataset}
        for spec in plan.specs
        for seed in plan.seeds
    ]
    with run_pool(jobs) as pool:
        pool.submit(_plan_run, kwargss)
        results = [result for _, result in pool.results()]
    results = sorted(results, key=lambda r: (r.variant, r.seed))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "results.csv"), "w") as outfile:
            write_results_csv(outfile, results)
        rows = aggregate_results(results, plan.resamples, plan.level, plan.eval_seed)
        with open(os.path.join(out_dir, "aggregate.csv"), "w") as outfile:
            write_aggregate_csv(outfile, rows)
        logger.info(f"wrote {len(results)} evaluation results to {out_dir}")
    return results
