"""
Maze environments
-----------------

A maze is a grid of wall and free cells. In the continuous variant the agent
is a point moving at most ``max_step_size`` per axis per step, with each axis
clipped independently against walls. In the discrete variant the agent moves
one cell up, down, left or right. Teleport pads move an agent that enters them
to a uniformly drawn exit cell.

Positions are (row, column) pairs in both variants; discrete positions are
integral cell coordinates, continuous ones are real coordinates where cell
(r, c) covers [r, r + 1) x [c, c + 1) times ``cell_size``.

Mazes are written as text: optional ``key = value`` header lines, then grid
rows using ``#`` wall, ``.`` free, ``S`` start region, ``G`` evaluation goal and
``T`` teleport pad.
"""

import hashlib
import logging
from collections import deque
from typing import (
    TYPE_CHECKING,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from typing_extensions import Self

from .config import read_config_lines
from .errors import (
    ConfigError,
    DatasetGenerationError,
    PureARLError,
    UnreachableGoalError,
)

if TYPE_CHECKING:
    from .data import Dataset

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])

WALL, FREE, START, GOAL, TELEPORT = "#", ".", "S", "G", "T"
_GRID_CHARS = frozenset(WALL + FREE + START + GOAL + TELEPORT)

STYLES = ("navigate", "stitch", "explore")
# stitch targets lie within this many cells of the current one
STITCH_RADIUS = 4
MAX_REROLLS = 8


class MazeSpec:
    name: str
    walls: np.ndarray
    start_cells: List[Cell]
    goal_cells: List[Cell]
    continuous: bool
    cell_size: float
    max_step_size: float
    goal_radius: float
    teleport_pads: List[Cell]
    teleport_exits: List[Cell]
    text: str
    _distance_cache: Dict[Cell, np.ndarray]

    def __init__(
        self,
        name: str,
        walls: np.ndarray,
        start_cells: Iterable[Cell] = (),
        goal_cells: Iterable[Cell] = (),
        continuous: bool = True,
        cell_size: float = 1.0,
        max_step_size: float = 0.2,
        goal_radius: float = 0.5,
        teleport_pads: Iterable[Cell] = (),
        teleport_exits: Iterable[Cell] = (),
        text: Optional[str] = None,
    ):
        self.name = name
        self.walls = np.array(walls, dtype=bool)
        assert self.walls.ndim == 2, f"walls must be a matrix, got {self.walls.shape}"
        self.start_cells = [tuple(c) for c in start_cells]  # type: ignore
        self.goal_cells = [tuple(c) for c in goal_cells]  # type: ignore
        self.continuous = continuous
        self.cell_size = float(cell_size)
        self.max_step_size = float(max_step_size)
        self.goal_radius = float(goal_radius) if continuous else 0.0
        self.teleport_pads = [tuple(c) for c in teleport_pads]  # type: ignore
        self.teleport_exits = [tuple(c) for c in teleport_exits]  # type: ignore
        self.text = text if text is not None else self.to_text()
        self._distance_cache = {}
        self._validate()

    def __repr__(self) -> str:
        kind = "continuous" if self.continuous else "discrete"
        return f"{self.__class__.__name__}({self.name}, {self.shape}, {kind})"

    def _validate(self) -> None:
        if not self.free_cells:
            raise ConfigError(f"maze {self.name} has no free cell")
        if self.cell_size <= 0 or self.max_step_size <= 0 or self.goal_radius < 0:
            raise ConfigError(f"maze {self.name} has invalid continuous parameters")
        for cell in self.start_cells + self.goal_cells + self.teleport_pads + self.teleport_exits:
            if not self.is_free(cell):
                raise ConfigError(f"maze {self.name} marks wall cell {cell}")
        if self.teleport_pads and not self.teleport_exits:
            raise ConfigError(f"maze {self.name} has teleport pads but no exits")
        if set(self.teleport_pads) & set(self.teleport_exits):
            raise ConfigError(f"maze {self.name} has a teleport exit on a pad")
        for goal in self.goal_cells:
            distances = self.distances_to(goal)
            for start in self.start_region:
                if distances[start] < 0:
                    raise UnreachableGoalError(
                        f"goal {goal} unreachable from start {start} in {self.name}",
                        (start, goal),
                    )

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.walls.shape[0]), int(self.walls.shape[1])

    @property
    def discrete(self) -> bool:
        return not self.continuous

    @property
    def free_cells(self) -> List[Cell]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.walls))]

    @property
    def start_region(self) -> List[Cell]:
        return self.start_cells if self.start_cells else self.free_cells

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2 if self.continuous else len(MOVES)

    @property
    def steps_per_cell(self) -> int:
        if not self.continuous:
            return 1
        return int(np.ceil(self.cell_size / self.max_step_size - 1e-9))

    def env_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def in_bounds(self, cell: Cell) -> bool:
        rows, cols = self.shape
        return 0 <= cell[0] < rows and 0 <= cell[1] < cols

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.walls[cell]

    def cell_of(self, position: np.ndarray) -> Cell:
        if self.continuous:
            r, c = np.floor(np.asarray(position) / self.cell_size)
        else:
            r, c = np.rint(np.asarray(position))
        return int(r), int(c)

    def position_of(self, cell: Cell) -> np.ndarray:
        """observation for the centre of a cell"""
        if self.continuous:
            return (np.array(cell, dtype=np.float64) + 0.5) * self.cell_size
        return np.array(cell, dtype=np.float64)

    def is_free_position(self, position: np.ndarray) -> bool:
        return self.is_free(self.cell_of(position))

    def distances_to(self, target: Cell) -> np.ndarray:
        """flood-fill step counts to target over free cells, -1 where unreachable"""
        target = (int(target[0]), int(target[1]))
        if target not in self._distance_cache:
            self._distance_cache[target] = flood_fill(self.walls, target)
        return self._distance_cache[target]

    def distance(self, a: Cell, b: Cell) -> int:
        return int(self.distances_to(b)[a])

    def optimal_steps(self, start: np.ndarray, goal: np.ndarray) -> int:
        """environment steps a shortest path needs, from flood-fill distance"""
        cells = self.distance(self.cell_of(start), self.cell_of(goal))
        if cells < 0:
            return -1
        return max(1, cells * self.steps_per_cell)

    @classmethod
    def from_text(cls, name: str, text: str) -> Self:
        header: List[str] = []
        rows: List[str] = []
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped:
                continue
            if "=" in stripped:
                header.append(stripped)
            elif set(stripped) <= _GRID_CHARS:
                rows.append(stripped)
            else:
                raise ConfigError(f"maze {name}: unrecognised line {line!r}")
        if not rows:
            raise ConfigError(f"maze {name} has no grid rows")
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"maze {name} has ragged rows")

        params: Dict[str, str] = {key: value for _, key, value in read_config_lines(header)}
        known = {"continuous", "cell_size", "max_step_size", "goal_radius", "teleport.exits"}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"maze {name} has unknown header keys {sorted(unknown)}")

        walls = np.array([[char == WALL for char in row] for row in rows])
        marked: Dict[str, List[Cell]] = {START: [], GOAL: [], TELEPORT: []}
        for r, row in enumerate(rows):
            for c, char in enumerate(row):
                if char in marked:
                    marked[char].append((r, c))

        exits = [_parse_cell(part) for part in params.get("teleport.exits", "").split(",") if part.strip()]
        try:
            return cls(
                name,
                walls,
                start_cells=marked[START],
                goal_cells=marked[GOAL],
                continuous=params.get("continuous", "true").lower() == "true",
                cell_size=float(params.get("cell_size", 1.0)),
                max_step_size=float(params.get("max_step_size", 0.2)),
                goal_radius=float(params.get("goal_radius", 0.5)),
                teleport_pads=marked[TELEPORT],
                teleport_exits=exits,
                text=text,
            )
        except ValueError as e:
            if isinstance(e, PureARLError):
                raise
            raise ConfigError(f"maze {name}: {e}") from e

    @classmethod
    def from_file(cls, path: str) -> Self:
        with open(path) as infile:
            return cls.from_text(path, infile.read())

    def to_text(self) -> str:
        lines = [f"continuous = {'true' if self.continuous else 'false'}"]
        if self.continuous:
            lines.append(f"cell_size = {self.cell_size!r}")
            lines.append(f"max_step_size = {self.max_step_size!r}")
            lines.append(f"goal_radius = {self.goal_radius!r}")
        if self.teleport_exits:
            lines.append("teleport.exits = " + ",".join(f"{r}:{c}" for r, c in self.teleport_exits))
        grid = [[WALL if w else FREE for w in row] for row in self.walls]
        for char, cells in ((START, self.start_cells), (GOAL, self.goal_cells), (TELEPORT, self.teleport_pads)):
            for r, c in cells:
                grid[r][c] = char
        lines.extend("".join(row) for row in grid)
        return "\n".join(lines) + "\n"


def _parse_cell(raw: str) -> Cell:
    try:
        r, c = raw.strip().split(":")
        return int(r), int(c)
    except ValueError as e:
        raise ConfigError(f"invalid cell {raw!r}, expected row:col") from e


def parse_cells(raw: str) -> List[Cell]:
    """parse "r:c,r:c" cell lists as used in configs and maze headers"""
    return [_parse_cell(part) for part in raw.split(",") if part.strip()]


def flood_fill(walls: np.ndarray, target: Cell) -> np.ndarray:
    distances = np.full(walls.shape, -1, dtype=np.int64)
    if walls[target]:
        return distances
    distances[target] = 0
    queue = deque([target])
    rows, cols = walls.shape
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not walls[nr, nc] and distances[nr, nc] < 0:
                distances[nr, nc] = distances[r, c] + 1
                queue.append((nr, nc))
    return distances


class EnvState:
    position: np.ndarray
    steps: int
    __slots__ = ["position", "steps"]

    def __init__(self, position: Union[np.ndarray, Sequence[float]], steps: int = 0):
        self.position = np.array(position, dtype=np.float64)
        self.steps = steps

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.position.tolist()}, steps={self.steps})"


class GoalTest:
    """closed ball of radius around goal; radius 0 means exact match"""

    goal: np.ndarray
    radius: float
    __slots__ = ["goal", "radius"]

    def __init__(self, goal: Union[np.ndarray, Sequence[float]], radius: float = 0.0):
        assert radius >= 0.0, f"goal radius must be non-negative, got {radius}"
        self.goal = np.array(goal, dtype=np.float64)
        self.radius = float(radius)

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.goal.tolist()}, radius={self.radius})"

    def reached(self, position: np.ndarray) -> bool:
        return bool(np.linalg.norm(np.asarray(position) - self.goal) <= self.radius)

    @classmethod
    def for_spec(cls, spec: MazeSpec, goal: np.ndarray) -> Self:
        return cls(goal, spec.goal_radius)


def action_index(action: Union[int, np.integer, np.ndarray]) -> int:
    if np.ndim(action) == 0:
        return int(action)  # type: ignore
    return int(np.argmax(action))


def _teleport(spec: MazeSpec, before: Cell, position: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
    cell = spec.cell_of(position)
    if cell == before or cell not in spec.teleport_pads:
        return position
    # without a stream the first exit is used so replay stays deterministic
    index = int(rng.integers(len(spec.teleport_exits))) if rng is not None else 0
    exit_cell = spec.teleport_exits[index]
    logger.debug(f"teleport from {cell} to {exit_cell}")
    return spec.position_of(exit_cell)


def step(
    spec: MazeSpec,
    s: EnvState,
    a: Union[int, np.ndarray, Sequence[float]],
    rng: Optional[np.random.Generator] = None,
) -> EnvState:
    before = spec.cell_of(s.position)
    position = s.position.copy()
    if spec.continuous:
        delta = np.clip(np.asarray(a, dtype=np.float64).reshape(2), -1.0, 1.0) * spec.max_step_size
        for axis in (0, 1):
            trial = position.copy()
            trial[axis] += delta[axis]
            if spec.is_free_position(trial):
                position = trial
    else:
        index = action_index(a)  # type: ignore
        if 0 <= index < len(MOVES):
            cell = (before[0] + int(MOVES[index][0]), before[1] + int(MOVES[index][1]))
            if spec.is_free(cell):
                position = spec.position_of(cell)
    position = _teleport(spec, before, position, rng)
    return EnvState(position, s.steps + 1)


def reward(s: Union[EnvState, np.ndarray], g: GoalTest) -> float:
    position = s.position if isinstance(s, EnvState) else s
    return 0.0 if g.reached(position) else -1.0


def reward_batch(states: np.ndarray, goals: np.ndarray, radius: float) -> np.ndarray:
    """vectorised reward: 0 where the goal test fires, -1 elsewhere"""
    distances = np.linalg.norm(np.asarray(states) - np.asarray(goals), axis=-1)
    return np.where(distances <= radius, 0.0, -1.0)


class ScriptedPolicy:
    """
    flood-fill shortest path with epsilon-uniform action noise

    implements the same act() interface as a trained agent so it can be
    evaluated directly; act() is noise free when deterministic
    """

    spec: MazeSpec
    noise: float

    def __init__(self, spec: MazeSpec, noise: float = 0.0):
        assert 0.0 <= noise <= 1.0, f"noise must be in [0, 1], got {noise}"
        self.spec = spec
        self.noise = noise

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.spec.name}, noise={self.noise})"

    def _random_action(self, rng: np.random.Generator) -> np.ndarray:
        if self.spec.continuous:
            return rng.uniform(-1.0, 1.0, size=2)
        return np.eye(len(MOVES))[int(rng.integers(len(MOVES)))]

    def next_cell(self, cell: Cell, target: Cell) -> Cell:
        distances = self.spec.distances_to(target)
        here = distances[cell]
        if here < 0:
            raise UnreachableGoalError(f"cell {target} unreachable from {cell}", (cell, target))
        if here == 0:
            return cell
        for dr, dc in MOVES:
            candidate = (cell[0] + int(dr), cell[1] + int(dc))
            if self.spec.is_free(candidate) and distances[candidate] == here - 1:
                return candidate
        raise AssertionError(f"flood fill has no descent from {cell}")

    def action_toward(
        self,
        position: np.ndarray,
        target_cell: Cell,
        rng: Optional[np.random.Generator] = None,
        aim: Optional[np.ndarray] = None,
        noise: Optional[float] = None,
    ) -> np.ndarray:
        noise = self.noise if noise is None else noise
        if noise > 0.0 and rng is not None and rng.random() < noise:
            return self._random_action(rng)
        cell = self.spec.cell_of(position)
        nxt = self.next_cell(cell, target_cell)
        if not self.spec.continuous:
            move = (nxt[0] - cell[0], nxt[1] - cell[1])
            index = next((i for i, m in enumerate(MOVES) if tuple(m) == move), UP)
            return np.eye(len(MOVES))[index]
        if nxt == cell:
            point = aim if aim is not None else self.spec.position_of(cell)
        else:
            point = self.spec.position_of(nxt)
        return np.clip((point - position) / self.spec.max_step_size, -1.0, 1.0)

    def act(
        self,
        s: np.ndarray,
        g: np.ndarray,
        deterministic: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        return self.action_toward(
            np.asarray(s, dtype=np.float64),
            self.spec.cell_of(g),
            rng,
            aim=np.asarray(g, dtype=np.float64),
            noise=0.0 if deterministic else None,
        )


class _UnreachableTarget(Exception):
    pass


def _pick_target(spec: MazeSpec, style: str, cell: Cell, rng: np.random.Generator) -> Cell:
    distances = flood_fill(spec.walls, cell)
    if style == "stitch":
        mask = (distances >= 1) & (distances <= STITCH_RADIUS)
    elif style == "navigate":
        far = max(1, int(distances.max()) // 2)
        mask = distances >= far
    else:
        mask = distances >= 0
    candidates = np.argwhere(mask)
    if len(candidates) == 0:
        raise _UnreachableTarget(f"no {style} target from {cell}")
    r, c = candidates[int(rng.integers(len(candidates)))]
    return int(r), int(c)


def _rollout(
    spec: MazeSpec, style: str, horizon: int, noise: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    policy = ScriptedPolicy(spec, 1.0 if style == "explore" else noise)
    free = spec.free_cells
    start = free[int(rng.integers(len(free)))]
    state = EnvState(spec.position_of(start))
    target = _pick_target(spec, style, start, rng)

    states = np.zeros((horizon + 1, spec.state_dim))
    actions = np.zeros((horizon, spec.action_dim))
    states[0] = state.position
    for t in range(horizon):
        cell = spec.cell_of(state.position)
        if cell == target:
            target = _pick_target(spec, style, cell, rng)
        if spec.distance(cell, target) < 0:
            raise _UnreachableTarget(f"target {target} unreachable from {cell}")
        action = policy.action_toward(state.position, target, rng)
        state = step(spec, state, action, rng)
        actions[t] = action
        states[t + 1] = state.position
    return states, actions


def generate_dataset(
    spec: MazeSpec,
    behaviour: str,
    n_trajectories: int,
    horizon: int,
    noise: float,
    seed: int,
) -> "Dataset":
    """
    roll out the scripted behaviour for n_trajectories of exactly horizon steps

    trajectory i, attempt k draws from its own stream seeded by (seed, i, k)
    so datasets replay exactly and a re-roll never shifts other trajectories
    """
    from .data import Dataset

    if behaviour not in STYLES:
        raise ConfigError(f"unknown dataset style {behaviour}, expected one of {STYLES}")
    if n_trajectories < 1 or horizon < 1:
        raise ConfigError(f"need N >= 1 and H >= 1, got N={n_trajectories} H={horizon}")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError(f"noise must be in [0, 1], got {noise}")

    states = np.zeros((n_trajectories, horizon + 1, spec.state_dim))
    actions = np.zeros((n_trajectories, horizon, spec.action_dim))
    for i in range(n_trajectories):
        for attempt in range(MAX_REROLLS + 1):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, attempt]))
            try:
                states[i], actions[i] = _rollout(spec, behaviour, horizon, noise, rng)
                break
            except (_UnreachableTarget, UnreachableGoalError) as e:
                logger.warning(f"re-rolling trajectory {i} after attempt {attempt}: {e}")
        else:
            raise DatasetGenerationError(
                f"trajectory {i} failed after {MAX_REROLLS + 1} attempts in {spec.name}"
            )
    logger.info(f"generated {n_trajectories}x{horizon} {behaviour} dataset on {spec.name}")
    return Dataset(
        states,
        actions,
        env_id=spec.name,
        goal_radius=spec.goal_radius,
        discrete=spec.discrete,
        style=behaviour,
        seed=seed,
        noise=noise,
    )


def adjacent_goals(spec: MazeSpec, start: Cell, count: int = 5) -> List[Cell]:
    """free cells one step from start, for sanity evaluations"""
    distances = spec.distances_to(start)
    cells = [c for c in spec.free_cells if distances[c] == 1]
    return cells[:count]


def far_goals(spec: MazeSpec, start: Cell, min_distance: int) -> List[Cell]:
    distances = spec.distances_to(start)
    return [c for c in spec.free_cells if distances[c] >= min_distance]


POINTMAZE15 = """\
continuous = true
cell_size = 1.0
max_step_size = 0.2
goal_radius = 0.5
###############
#S...........G#
###########.###
#.............#
###.###########
#............G#
#########.#####
#.............#
#####.#########
#......G......#
#######.#######
#.............#
#.#############
#G...........G#
###############
"""

OPEN5 = """\
continuous = true
cell_size = 1.0
max_step_size = 0.2
goal_radius = 0.5
#######
#S.G.G#
#.....#
#..G..#
#.....#
#G...G#
#######
"""

TELEPORT15 = """\
continuous = true
cell_size = 1.0
max_step_size = 0.2
goal_radius = 0.5
teleport.exits = 13:7,3:1
###############
#S...........G#
###########.###
#.............#
###.###########
#............G#
#########.#####
#......T......#
#####.#########
#......G......#
#######.#######
#..T..........#
#.#############
#G...........G#
###############
"""

FOURROOMS = """\
continuous = false
###########
#S...#...G#
#....#....#
#.........#
#....#....#
##.#####.##
#....#....#
#.........#
#....#....#
#G...#...G#
###########
"""


def _discrete(text: str) -> str:
    lines = [line for line in text.splitlines() if "=" not in line]
    return "continuous = false\n" + "\n".join(lines) + "\n"


MAZES: Dict[str, str] = {
    "pointmaze15": POINTMAZE15,
    "gridmaze15": _discrete(POINTMAZE15),
    "pointmaze5": OPEN5,
    "gridmaze5": _discrete(OPEN5),
    "teleport15": TELEPORT15,
    "fourrooms": FOURROOMS,
}


def load_maze(env_id: str, path: Optional[str] = None) -> MazeSpec:
    """built-in maze by id, or a maze text file when path is given"""
    if path:
        with open(path) as infile:
            return MazeSpec.from_text(env_id, infile.read())
    if env_id not in MAZES:
        raise ConfigError(f"unknown env id {env_id}, expected one of {sorted(MAZES)}")
    return MazeSpec.from_text(env_id, MAZES[env_id])
