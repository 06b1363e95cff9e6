"""
Command line entry point.

    purearl gen-data  --env pointmaze15 --style stitch --n 2000 --h 50 --seed 1
    purearl train     --dataset runs/gen-data/dataset.parl --variant arli --steps 50000 --seed 0
    purearl eval      --run-dir runs/train --episodes 20
    purearl dump-grid --checkpoint runs/train/arle/seed0/agent.parl --level low --goal 7:7
    purearl tabular   --instances 20 --max-states 25 --seed 7

Settings come from --config, then the command flags, then --set key=value.
Exit codes: 0 success, 2 configuration or usage error, 3 numeric abort.
"""

import argparse
import datetime
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .agents import Agent, AgentSpec, write_metrics
from .config import RunConfig
from .data import Dataset
from .envs import Cell, MazeSpec, adjacent_goals, far_goals, generate_dataset, load_maze, parse_cells
from .errors import ConfigError, NumericAbort, PureARLError, TrainingAborted, UsageError
from .harness import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    aggregate_results,
    dump_value_grid,
    evaluate,
    run_single,
    write_aggregate_csv,
    write_grid_csv,
    write_results_csv,
)
from .mp import run_pool
from .tabular import run_sweep, write_report_csv, write_report_records

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DATASET_NAME = "dataset.parl"

# command -> (flag, dest, config key, type, help)
FLAGS: Dict[str, List[Tuple[str, str, str, Any, str]]] = {
    "gen-data": [
        ("--env", "env_id", "env.id", str, "built-in maze id"),
        ("--env-file", "env_file", "env.file", str, "maze text file"),
        ("--style", "style", "dataset.style", str, "navigate, stitch or explore"),
        ("--n", "n", "dataset.n", int, "number of trajectories"),
        ("--h", "h", "dataset.h", int, "steps per trajectory"),
        ("--noise", "noise", "dataset.noise", float, "behaviour noise"),
        ("--seed", "seed", "dataset.seed", int, "dataset seed"),
        ("--out", "out", "output.dir", str, "output directory"),
    ],
    "train": [
        ("--dataset", "dataset", "dataset.path", str, "dataset file"),
        ("--variant", "variant", "train.variants", str, "comma separated variants"),
        ("--profile", "profile", "agent.profile", str, "hyperparameter profile"),
        ("--steps", "steps", "train.steps", int, "gradient steps"),
        ("--seed", "seed", "train.seeds", str, "comma separated seeds"),
        ("--out", "out", "output.dir", str, "output directory"),
    ],
    "eval": [
        ("--run-dir", "run_dir", "eval.run_dir", str, "directory written by train"),
        ("--episodes", "episodes", "eval.episodes", int, "episodes per goal"),
        ("--goals", "goals", "eval.goals", str, "r:c list, adjacent, or far:<distance>"),
        ("--seed", "seed", "eval.seed", int, "evaluation seed"),
        ("--max-steps", "max_steps", "eval.max_steps", int, "step budget per episode"),
        ("--out", "out", "output.dir", str, "output directory"),
    ],
    "dump-grid": [
        ("--checkpoint", "checkpoint", "grid.checkpoint", str, "agent checkpoint"),
        ("--level", "level", "grid.level", str, "low or high"),
        ("--goal", "goal", "grid.goal", str, "goal or waypoint cell r:c"),
        ("--resolution", "resolution", "grid.resolution", str, "rows,cols"),
        ("--env", "env_id", "env.id", str, "built-in maze id"),
        ("--out", "out", "output.dir", str, "output directory"),
    ],
    "tabular": [
        ("--instances", "instances", "tabular.instances", int, "number of MDPs"),
        ("--max-states", "max_states", "tabular.max_states", int, "largest MDP"),
        ("--seed", "seed", "tabular.seed", int, "sweep seed"),
        ("--n", "n", "tabular.n", int, "option horizon"),
        ("--gamma", "gamma", "tabular.gamma", float, "discount"),
        ("--epsilon", "epsilon", "tabular.epsilon", float, "epsilon-greedy corruption"),
        ("--out", "out", "output.dir", str, "output directory"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purearl", description="offline goal-conditioned hierarchical RL")
    commands = parser.add_subparsers(dest="command", required=True)
    for command, flags in FLAGS.items():
        sub = commands.add_parser(command)
        sub.add_argument("--config", help="config file of dotted.key = value lines")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any key")
        sub.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        sub.add_argument("--jobs", type=int, default=1, help="parallel runs")
        verbosity = sub.add_mutually_exclusive_group()
        verbosity.add_argument("--verbose", action="store_true")
        verbosity.add_argument("--quiet", action="store_true")
        for flag, dest, _, kind, help_text in flags:
            sub.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
        if command == "gen-data":
            sub.add_argument("--csv", action="store_true", default=None, help="also export CSV")
        if command == "eval":
            mode = sub.add_mutually_exclusive_group()
            mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
            mode.add_argument("--stochastic", dest="deterministic", action="store_false")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    for _, dest, key, _, _ in FLAGS[args.command]:
        value = getattr(args, dest, None)
        if value is not None:
            config.set_raw(key, str(value))
    if getattr(args, "csv", None):
        config["dataset.csv_export"] = True
    if getattr(args, "deterministic", None) is not None:
        config["eval.deterministic"] = args.deterministic
    if args.force:
        config["output.force"] = True
    config.apply_overrides(args.set)
    config.resolve_paths()
    return config


def prepare_output(config: RunConfig, command: str) -> str:
    out = config.output_dir(command)
    if os.path.isdir(out) and os.listdir(out) and not config["output.force"]:
        raise ConfigError(f"output directory {out} exists, use --force to overwrite")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as outfile:
        config.write_to(outfile)
    return out


def write_manifest(out: str, entries: Mapping[str, Any]) -> None:
    """provenance; the only file that carries a timestamp"""
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out, "manifest.txt"), "w") as outfile:
        for key, value in sorted({**entries, "timestamp": stamp}.items()):
            outfile.write(f"{key} = {value}\n")


def _maze(config: RunConfig) -> MazeSpec:
    return load_maze(config["env.id"], config["env.file"])


def cmd_gen_data(config: RunConfig) -> int:
    maze = _maze(config)
    out = prepare_output(config, "gen-data")
    dataset = generate_dataset(
        maze,
        config["dataset.style"],
        config["dataset.n"],
        config["dataset.h"],
        config["dataset.noise"],
        config["dataset.seed"],
    )
    with open(os.path.join(out, DATASET_NAME), "wb") as outfile:
        dataset.write_to(outfile)
    if config["dataset.csv_export"]:
        with open(os.path.join(out, "dataset.csv"), "w") as outfile:
            dataset.write_csv(outfile)
    write_manifest(
        out,
        {
            "env.id": maze.name,
            "env.hash": maze.env_hash(),
            "dataset.seed": dataset.seed,
            "dataset.n": dataset.n_trajectories,
            "dataset.h": dataset.horizon,
            "dataset.transitions": dataset.n_transitions,
        },
    )
    logger.info(f"wrote {dataset.n_transitions} transitions to {out}")
    return EXIT_OK


def train_to_dir(spec: AgentSpec, seed: int, dataset_path: str, steps: int, log_interval: int, run_dir: str) -> Dict[str, Any]:
    """one training run; an abort still leaves the last-good checkpoint behind"""
    dataset = Dataset.from_file(dataset_path)
    try:
        metrics = run_single(spec, seed, dataset, steps, log_interval, run_dir)["metrics"]
    except TrainingAborted as e:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, CHECKPOINT_NAME), "wb") as outfile:
            e.agent.write_to(outfile)
        with open(os.path.join(run_dir, METRICS_NAME), "w") as outfile:
            write_metrics(outfile, e.metrics)
        return {"aborted": True, "error": str(e), "step": e.step}
    return {"aborted": False, "final": metrics[-1] if metrics else {}}


def cmd_train(config: RunConfig, jobs: int = 1) -> int:
    path = config["dataset.path"]
    if not path or not os.path.exists(path):
        raise ConfigError(f"dataset file {path} not found")
    dataset = Dataset.from_file(path)
    config["env.id"] = dataset.env_id
    variants = config["train.variants"] or [config["agent.variant"]]
    specs = [
        AgentSpec.from_config(config, dataset.state_dim, dataset.action_dim, dataset.discrete, variant)
        for variant in variants
    ]
    out = prepare_output(config, "train")
    kwargss = [
        {
            "spec": spec,
            "seed": seed,
            "dataset_path": path,
            "steps": config["train.steps"],
            "log_interval": config["train.log_interval"],
            "run_dir": os.path.join(out, spec.variant, f"seed{seed}"),
        }
        for spec in specs
        for seed in config["train.seeds"]
    ]
    with run_pool(jobs) as pool:
        pool.submit(train_to_dir, kwargss)
        outcomes = sorted(
            ((kwargs["spec"].variant, kwargs["seed"], result) for kwargs, result in pool.results()),
            key=lambda item: item[:2],
        )
    write_manifest(
        out,
        {
            "dataset.path": path,
            "env.id": dataset.env_id,
            "train.runs": len(outcomes),
            "train.seeds": ",".join(str(s) for s in config["train.seeds"]),
            "train.steps": config["train.steps"],
        },
    )
    aborted = [(variant, seed, result) for variant, seed, result in outcomes if result["aborted"]]
    for variant, seed, result in aborted:
        logger.error(f"{variant} seed {seed} aborted: {result['error']}")
    return EXIT_NUMERIC if aborted else EXIT_OK


def find_checkpoints(run_dir: str) -> List[Tuple[str, int, str]]:
    """(variant, seed, path) for every <variant>/seed<k>/agent.parl under run_dir"""
    found = []
    if not os.path.isdir(run_dir):
        raise UsageError(f"run directory {run_dir} not found")
    for variant in sorted(os.listdir(run_dir)):
        variant_dir = os.path.join(run_dir, variant)
        if not os.path.isdir(variant_dir):
            continue
        for name in sorted(os.listdir(variant_dir)):
            path = os.path.join(variant_dir, name, CHECKPOINT_NAME)
            if name.startswith("seed") and name[4:].isdigit() and os.path.exists(path):
                found.append((variant, int(name[4:]), path))
    if not found:
        raise UsageError(f"no checkpoint found under {run_dir}")
    return sorted(found)


def resolve_goals(maze: MazeSpec, raw: Optional[str]) -> List[Cell]:
    """maze G cells by default; also "adjacent", "far:<distance>" or an r:c list"""
    anchor = maze.start_region[0]
    if not raw:
        goals = list(maze.goal_cells)
    elif raw == "adjacent":
        goals = adjacent_goals(maze, anchor)
    elif raw.startswith("far:"):
        goals = far_goals(maze, anchor, int(raw[4:]))
    else:
        goals = parse_cells(raw)
    if not goals:
        raise ConfigError(f"no evaluation goals from {raw!r} in {maze.name}")
    return goals


def eval_checkpoint(
    path: str,
    variant: str,
    seed: int,
    env_id: str,
    env_file: Optional[str],
    goals: Sequence[Cell],
    episodes: int,
    max_steps: Optional[int],
    eval_seed: int,
    deterministic: bool,
) -> Any:
    agent = Agent.from_file(path)
    maze = load_maze(env_id, env_file)
    return evaluate(agent, maze, goals, episodes, max_steps, eval_seed, deterministic, variant, seed)


def _training_env(run_dir: str, config: RunConfig) -> Tuple[str, Optional[str]]:
    trained = os.path.join(run_dir, "config.txt")
    if os.path.exists(trained):
        source = RunConfig.from_file(trained)
        return source["env.id"], source["env.file"]
    return config["env.id"], config["env.file"]


def cmd_eval(config: RunConfig, jobs: int = 1) -> int:
    run_dir = config["eval.run_dir"]
    if not run_dir:
        raise UsageError("eval needs --run-dir")
    checkpoints = find_checkpoints(run_dir)
    env_id, env_file = _training_env(run_dir, config)
    maze = load_maze(env_id, env_file)
    goals = resolve_goals(maze, config["eval.goals"])
    out = prepare_output(config, "eval")
    kwargss = [
        {
            "path": path,
            "variant": variant,
            "seed": seed,
            "env_id": env_id,
            "env_file": env_file,
            "goals": goals,
            "episodes": config["eval.episodes"],
            "max_steps": config["eval.max_steps"],
            "eval_seed": config["eval.seed"],
            "deterministic": config["eval.deterministic"],
        }
        for variant, seed, path in checkpoints
    ]
    with run_pool(jobs) as pool:
        pool.submit(eval_checkpoint, kwargss)
        results = sorted((result for _, result in pool.results()), key=lambda r: (r.variant, r.seed))
    rows = aggregate_results(results, config["eval.resamples"], config["eval.level"], config["eval.seed"])
    with open(os.path.join(out, "results.csv"), "w") as outfile:
        write_results_csv(outfile, results)
    with open(os.path.join(out, "aggregate.csv"), "w") as outfile:
        write_aggregate_csv(outfile, rows)
    write_manifest(
        out,
        {
            "env.id": maze.name,
            "env.hash": maze.env_hash(),
            "eval.seed": config["eval.seed"],
            "eval.checkpoints": len(checkpoints),
            "eval.goals": len(goals),
        },
    )
    for row in rows:
        logger.info(f"{row['variant']}: {row['mean']:.3f} [{row['ci_low']:.3f}, {row['ci_high']:.3f}]")
    return EXIT_OK


def cmd_dump_grid(config: RunConfig) -> int:
    path = config["grid.checkpoint"]
    if not path or not os.path.exists(path):
        raise UsageError(f"checkpoint {path} not found")
    agent = Agent.from_file(path)
    maze = _maze(config)
    goal_cells = parse_cells(config["grid.goal"]) if config["grid.goal"] else list(maze.goal_cells)
    if not goal_cells:
        raise ConfigError("dump-grid needs --goal")
    resolution = config["grid.resolution"]
    if len(resolution) != 2:
        raise ConfigError(f"resolution must be rows,cols, got {resolution}")
    out = prepare_output(config, "dump-grid")
    grid = dump_value_grid(
        agent, maze, maze.position_of(goal_cells[0]), (resolution[0], resolution[1]), config["grid.level"]
    )
    with open(os.path.join(out, "values.csv"), "w") as outfile:
        write_grid_csv(outfile, grid, grid.values, "value")
    with open(os.path.join(out, "gradient.csv"), "w") as outfile:
        write_grid_csv(outfile, grid, grid.gradient, "gradient")
    write_manifest(out, {"env.id": maze.name, "env.hash": maze.env_hash(), "grid.checkpoint": path})
    logger.info(f"wrote {grid.resolution} {grid.level} value grid to {out}")
    return EXIT_OK


def cmd_tabular(config: RunConfig) -> int:
    out = prepare_output(config, "tabular")
    reports = run_sweep(
        config["tabular.instances"],
        config["tabular.max_states"],
        config["tabular.seed"],
        config["tabular.n"],
        config["tabular.gamma"],
        config["tabular.epsilon"],
    )
    with open(os.path.join(out, "reports.jsonl"), "w") as outfile:
        write_report_records(outfile, reports)
    with open(os.path.join(out, "reports.csv"), "w") as outfile:
        write_report_csv(outfile, reports)
    passed = sum(r.all_passed for r in reports)
    write_manifest(out, {"tabular.seed": config["tabular.seed"], "tabular.instances": len(reports), "tabular.passed": passed})
    logger.info(f"{passed}/{len(reports)} instances passed every check")
    return EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-grid": cmd_dump_grid,
    "tabular": cmd_tabular,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        command = COMMANDS[args.command]
        if args.command in ("train", "eval"):
            return command(config, max(1, args.jobs))
        return command(config)
    except NumericAbort as e:
        logger.error(f"numeric abort: {e}")
        return EXIT_NUMERIC
    except (PureARLError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
