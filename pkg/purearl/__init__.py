from .agents import (  # noqa: disable=F401
    VARIANTS,
    Agent,
    AgentSpec,
    train,
    train_step,
    value_estimate,
)
from .config import RunConfig  # noqa: disable=F401
from .container import read_container, write_container  # noqa: disable=F401
from .data import Dataset, sample_batch  # noqa: disable=F401
from .envs import MazeSpec, generate_dataset, load_maze, step  # noqa: disable=F401
from .errors import (  # noqa: disable=F401
    ConfigError,
    NumericAbort,
    PureARLError,
    ShapeError,
    UnreachableGoalError,
    UsageError,
)
from .harness import ExperimentPlan, bootstrap_ci, evaluate, run_plan  # noqa: disable=F401
from .mp import MultiprocessRunPool, SerialRunPool  # noqa: disable=F401
from .tabular import (  # noqa: disable=F401
    AbstractionMap,
    FiniteMDP,
    HierarchyLift,
    concentrability,
    occupancy,
    value_iteration,
    verify_orderings,
)
