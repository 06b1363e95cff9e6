"""
Run configuration
-----------------

Configuration is flat text, one ``dotted.key = value`` per line, with ``#``
comments and blank lines allowed. Lines are parsed character by character by
a small finite state machine feeding an accumulator, the same text format is
used for maze file headers and for the header of binary containers.

Every known key has a type and a default in ``SCHEMA``; unknown keys are
rejected.
"""

import logging
import os
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Generator,
    Iterable,
    List,
    Mapping,
    Optional,
    Tuple,
    Type,
)

from typing_extensions import Self

from .errors import ConfigError

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PUREARL_OUTPUT_ROOT"

Callback = Callable[[Any, Optional[str]], None]


class CharInTransition:
    dst: Optional[str]
    condition: FrozenSet[str]
    callback: Optional[Callback]
    __slots__ = ["dst", "condition", "callback"]

    def __init__(self, dst: Optional[str], condition: Iterable[str], callback: Optional[Callback]):
        self.dst = dst
        self.condition = frozenset(condition)
        self.callback = callback

    def match(self, char: Optional[str]) -> bool:
        return char is not None and char in self.condition


class CharNotInTransition(CharInTransition):
    __slots__: List[str] = []

    def match(self, char: Optional[str]) -> bool:
        return char is not None and char not in self.condition


class EndTransition(CharInTransition):
    """matches the end of the line, passed to the machine as None"""

    __slots__: List[str] = []

    def match(self, char: Optional[str]) -> bool:
        return char is None or char in self.condition


class FSMachine:
    """
    character-driven state machine

    callbacks are called as callback(accumulator, char) after the state moves;
    a state of None means the line is finished
    """

    transitions: Dict[str, List[CharInTransition]]
    current_state: Optional[str]

    def __init__(self) -> None:
        self.transitions = {}
        self.current_state = None

    def add_transition(
        self,
        start_state: str,
        end_state: Optional[str],
        transition_class: Type[CharInTransition],
        condition: Iterable[str],
        callback: Optional[Callback] = None,
    ) -> None:
        self.transitions.setdefault(start_state, []).append(
            transition_class(end_state, condition, callback)
        )

    def run(self, line: str, initial_state: str, accumulator: Any) -> None:
        self.current_state = initial_state
        for char in line:
            self.process_next(char, accumulator)
            if self.current_state is None:
                break
        if self.current_state is not None:
            self.process_next(None, accumulator)
        assert self.current_state is None, f"Unexpected ending at {self.current_state}"

    def process_next(self, char: Optional[str], accumulator: Any) -> None:
        state = self.current_state
        assert state is not None
        for transition in self.transitions.get(state, ()):
            if transition.match(char):
                self.current_state = transition.dst
                if transition.callback:
                    transition.callback(accumulator, char)
                return
        raise ValueError(f"Unrecognized input {char!r} in state {state}")


LINE_START = "LINE_START"
KEY = "KEY"
AFTER_KEY = "AFTER_KEY"
BEFORE_VALUE = "BEFORE_VALUE"
VALUE = "VALUE"
COMMENT = "COMMENT"

_BLANK = " \t\r"
_NEWLINE = "\n"


class ConfigAccumulator:
    key: str
    value: str
    has_entry: bool
    __characters: List[str]

    def __init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.__characters = []
        self.key = ""
        self.value = ""
        self.has_entry = False

    def append_character(self, char: Optional[str]) -> None:
        assert char is not None
        self.__characters.append(char)

    def key_done(self, char: Optional[str]) -> None:
        self.key = "".join(self.__characters)
        self.__characters = []

    def value_done(self, char: Optional[str]) -> None:
        self.value = "".join(self.__characters).strip()
        self.__characters = []
        self.has_entry = True


def get_config_fsm() -> FSMachine:
    fsm = FSMachine()
    key_stop = _BLANK + _NEWLINE + "#="

    fsm.add_transition(LINE_START, LINE_START, CharInTransition, _BLANK)
    fsm.add_transition(LINE_START, COMMENT, CharInTransition, "#")
    fsm.add_transition(LINE_START, None, EndTransition, _NEWLINE)
    fsm.add_transition(
        LINE_START, KEY, CharNotInTransition, key_stop, ConfigAccumulator.append_character
    )

    fsm.add_transition(KEY, KEY, CharNotInTransition, key_stop, ConfigAccumulator.append_character)
    fsm.add_transition(KEY, AFTER_KEY, CharInTransition, _BLANK, ConfigAccumulator.key_done)
    fsm.add_transition(KEY, BEFORE_VALUE, CharInTransition, "=", ConfigAccumulator.key_done)

    fsm.add_transition(AFTER_KEY, AFTER_KEY, CharInTransition, _BLANK)
    fsm.add_transition(AFTER_KEY, BEFORE_VALUE, CharInTransition, "=")

    fsm.add_transition(BEFORE_VALUE, BEFORE_VALUE, CharInTransition, _BLANK)
    fsm.add_transition(BEFORE_VALUE, COMMENT, CharInTransition, "#", ConfigAccumulator.value_done)
    fsm.add_transition(BEFORE_VALUE, None, EndTransition, _NEWLINE, ConfigAccumulator.value_done)
    fsm.add_transition(
        BEFORE_VALUE, VALUE, CharNotInTransition, "#\n", ConfigAccumulator.append_character
    )

    fsm.add_transition(VALUE, COMMENT, CharInTransition, "#", ConfigAccumulator.value_done)
    fsm.add_transition(VALUE, None, EndTransition, _NEWLINE, ConfigAccumulator.value_done)
    fsm.add_transition(VALUE, VALUE, CharNotInTransition, "#\n", ConfigAccumulator.append_character)

    fsm.add_transition(COMMENT, None, EndTransition, _NEWLINE)
    fsm.add_transition(COMMENT, COMMENT, CharNotInTransition, _NEWLINE)
    return fsm


def read_config_lines(lines: Iterable[str]) -> Generator[Tuple[int, str, str], None, None]:
    """
    parse config text into (line number, key, raw value), skipping blank and
    comment lines
    """
    fsm = get_config_fsm()
    accumulator = ConfigAccumulator()
    for lineno, line in enumerate(lines, start=1):
        try:
            fsm.run(line, LINE_START, accumulator)
        except (ValueError, AssertionError) as e:
            logger.error(f"Error parsing config line {lineno}: {line!r}")
            raise ConfigError(f"malformed config line {lineno}: {line.rstrip()!r}") from e
        if accumulator.has_entry:
            yield lineno, accumulator.key, accumulator.value
        accumulator.reset()


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


def _split(raw: str) -> List[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "path": str,
    "ints": lambda raw: [int(part) for part in _split(raw)],
    "strs": _split,
}


def _format(kind: str, value: Any) -> str:
    if value is None:
        return ""
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


# key -> (kind, default); None defaults are filled later, e.g. from agent profiles
SCHEMA: Dict[str, Tuple[str, Any]] = {
    "env.id": ("str", "pointmaze15"),
    "env.file": ("path", None),
    "dataset.style": ("str", "stitch"),
    "dataset.n": ("int", 2000),
    "dataset.h": ("int", 50),
    "dataset.noise": ("float", 0.2),
    "dataset.seed": ("int", 0),
    "dataset.path": ("path", None),
    "dataset.csv_export": ("bool", False),
    "agent.variant": ("str", "arli"),
    "agent.profile": ("str", "desk"),
    "agent.n": ("int", None),
    "agent.gamma": ("float", None),
    "agent.tau": ("float", None),
    "agent.alpha": ("float", None),
    "agent.alpha_l": ("float", None),
    "agent.alpha_h": ("float", None),
    "agent.low_loss": ("str", None),
    "agent.high_loss": ("str", None),
    "agent.flat_loss": ("str", None),
    "agent.d": ("int", 10),
    "agent.target_rate": ("float", 0.005),
    "agent.exp_adv_max": ("float", 100.0),
    "agent.lr": ("float", 3e-4),
    "agent.batch_size": ("int", 1024),
    "agent.value_hidden": ("ints", [64, 64]),
    "agent.actor_hidden": ("ints", [64, 64]),
    "agent.rep_hidden": ("ints", [64, 64]),
    "agent.layer_norm": ("bool", True),
    "agent.log_std_min": ("float", -5.0),
    "agent.log_std_max": ("float", 2.0),
    "agent.option_norm": ("str", "length"),
    "train.steps": ("int", 50000),
    "train.seeds": ("ints", [0]),
    "train.variants": ("strs", None),
    "train.log_interval": ("int", 1000),
    "eval.run_dir": ("path", None),
    "eval.episodes": ("int", 20),
    "eval.goals": ("str", None),
    "eval.seed": ("int", 0),
    "eval.deterministic": ("bool", True),
    "eval.resamples": ("int", 10000),
    "eval.level": ("float", 0.95),
    "eval.max_steps": ("int", None),
    "grid.checkpoint": ("path", None),
    "grid.level": ("str", "low"),
    "grid.goal": ("str", None),
    "grid.resolution": ("ints", [30, 30]),
    "tabular.instances": ("int", 20),
    "tabular.max_states": ("int", 25),
    "tabular.seed": ("int", 0),
    "tabular.n": ("int", 2),
    "tabular.gamma": ("float", 0.99),
    "tabular.epsilon": ("float", 0.2),
    "output.dir": ("path", None),
    "output.force": ("bool", False),
}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key}")
    kind, _ = SCHEMA[key]
    if raw == "":
        return None
    try:
        return _PARSERS[kind](raw)
    except ValueError as e:
        raise ConfigError(f"invalid {kind} value for {key}: {raw!r}") from e


class RunConfig:
    values: Dict[str, Any]

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self[key] = value

    def __repr__(self) -> str:
        changed = {k: v for k, v in self.values.items() if v != SCHEMA[k][1]}
        return f"{self.__class__.__name__}({changed})"

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key}")
        return self.values[key]

    def __setitem__(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key}")
        self.values[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        value = self[key]
        return default if value is None else value

    def set_raw(self, key: str, raw: str) -> None:
        self[key] = parse_value(key, raw)

    def section(self, prefix: str) -> Dict[str, Any]:
        """values under prefix with the prefix stripped"""
        start = prefix + "."
        return {k[len(start):]: v for k, v in self.values.items() if k.startswith(start)}

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> Self:
        config = cls()
        for lineno, key, raw in read_config_lines(lines):
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key} on line {lineno}")
            config.set_raw(key, raw)
        return config

    @classmethod
    def from_file(cls, path: str) -> Self:
        try:
            with open(path) as infile:
                return cls.from_lines(infile)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """apply key=value strings, as given to --set"""
        for override in overrides:
            if "=" not in override:
                raise ConfigError(f"override must be key=value, got {override!r}")
            key, raw = override.split("=", 1)
            self.set_raw(key.strip(), raw.strip())

    def resolve_paths(self, base: Optional[str] = None) -> None:
        base = base or os.getcwd()
        for key, (kind, _) in SCHEMA.items():
            value = self.values[key]
            if kind == "path" and value:
                self.values[key] = os.path.abspath(os.path.join(base, os.path.expanduser(value)))

    def output_dir(self, command: str) -> str:
        """explicit output.dir, else <output root>/<command>"""
        explicit = self.values["output.dir"]
        if explicit:
            return str(explicit)
        root = os.environ.get(OUTPUT_ROOT_ENV, os.path.join(os.getcwd(), "runs"))
        return os.path.abspath(os.path.join(root, command))

    def to_text(self) -> str:
        lines = [f"{key} = {_format(SCHEMA[key][0], self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_to(self, outfile: Any) -> None:
        outfile.write(self.to_text())
