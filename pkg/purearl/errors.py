"""
Exceptions raised by purearl.

Everything derives from PureARLError so callers can catch the library as a
whole, and from the matching builtin so existing ``except ValueError`` code
keeps working.
"""

from typing import Any, Optional, Tuple


class PureARLError(Exception):
    pass


class ConfigError(PureARLError, ValueError):
    pass


class ShapeError(PureARLError, ValueError):
    pass


class UsageError(PureARLError, ValueError):
    pass


class UnreachableGoalError(PureARLError, ValueError):
    pair: Tuple[Any, Any]

    def __init__(self, message: str, pair: Tuple[Any, Any]):
        super().__init__(message)
        self.pair = pair

    def __reduce__(self) -> Any:
        # keep the pair when crossing a process boundary
        return (self.__class__, (str(self), self.pair))


class PolicyEquivalenceError(PureARLError, ValueError):
    witness: Tuple[Any, Any]

    def __init__(self, message: str, witness: Tuple[Any, Any]):
        super().__init__(message)
        self.witness = witness

    def __reduce__(self) -> Any:
        return (self.__class__, (str(self), self.witness))


class UnsupportedEnvironmentError(PureARLError, ValueError):
    pass


class DatasetGenerationError(PureARLError, RuntimeError):
    pass


class NumericAbort(PureARLError, RuntimeError):
    step: Optional[int]
    update: Optional[str]
    parameter: Optional[str]

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        update: Optional[str] = None,
        parameter: Optional[str] = None,
    ):
        super().__init__(message)
        self.step = step
        self.update = update
        self.parameter = parameter

    def __reduce__(self) -> Any:
        return (NumericAbort, (str(self), self.step, self.update, self.parameter))


class TrainingAborted(NumericAbort):
    """
    raised by training when a numeric abort happens mid-run

    agent holds the last-good parameters and metrics the log up to that point
    """

    agent: Any
    metrics: Any

    def __init__(self, cause: NumericAbort, agent: Any, metrics: Any):
        super().__init__(
            f"training aborted at step {cause.step}: {cause}",
            step=cause.step,
            update=cause.update,
            parameter=cause.parameter,
        )
        self.agent = agent
        self.metrics = metrics
