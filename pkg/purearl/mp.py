import logging
import multiprocessing
import multiprocessing.connection
from multiprocessing.connection import Connection
from multiprocessing.context import Process
from types import TracebackType
from typing import (
    Any,
    Callable,
    Generator,
    Iterable,
    List,
    Mapping,
    Optional,
    Tuple,
    Type,
    Union,
)

from typing_extensions import Self

"""
Pools for independent (variant, seed) runs.

Pipes rather than queues, so no shared memory locks are needed. Each run is
a call func(**kwargs) returning one picklable result; results come back in
completion order paired with their kwargs, for the caller to sort.
"""

logger = logging.getLogger(__name__)

SENTINEL = "SENTINEL"


class SerialRunPool:
    pending: List[Tuple[Callable[..., Any], Mapping[str, Any]]]

    def __init__(self, *args: Any, **kwargs: Any):
        self.pending = []

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exctype: Optional[Type[BaseException]],
        excinst: Optional[BaseException],
        exctb: Optional[TracebackType],
    ) -> None:
        pass

    def __len__(self) -> int:
        return 1

    def submit(self, func: Callable[..., Any], kwargss: Iterable[Mapping[str, Any]]) -> None:
        for kwargs in kwargss:
            self.pending.append((func, kwargs))

    def results(self) -> Generator[Tuple[Mapping[str, Any], Any], None, None]:
        while self.pending:
            func, kwargs = self.pending.pop(0)
            yield kwargs, func(**kwargs)


class MultiprocessRunPool:
    subprocs: List[Process]
    pipesparent: List[Connection]
    pipeschild: List[Connection]
    outstanding: int

    def __init__(self, ncpus: int = multiprocessing.cpu_count()):
        self.subprocs = []
        self.pipesparent = []
        self.pipeschild = []
        self.outstanding = 0
        for _ in range(ncpus):
            pipeparent, pipechild = multiprocessing.Pipe(duplex=True)
            subproc = multiprocessing.Process(
                target=self._run_pool_child,
                args=(pipechild,),
            )
            self.pipesparent.append(pipeparent)
            self.pipeschild.append(pipechild)
            self.subprocs.append(subproc)
        for subproc in self.subprocs:
            subproc.start()
        logger.debug(f"started {ncpus} run workers")

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exctype: Optional[Type[BaseException]],
        excinst: Optional[BaseException],
        exctb: Optional[TracebackType],
    ) -> None:
        for pipe in self.pipesparent:
            pipe.send(SENTINEL)
        for pipe in self.pipesparent:
            pipe.close()
        for subproc in self.subprocs:
            subproc.join(1)
            if subproc.is_alive():
                subproc.terminate()

    def __len__(self) -> int:
        return len(self.subprocs)

    def submit(self, func: Callable[..., Any], kwargss: Iterable[Mapping[str, Any]]) -> None:
        i = 0
        for kwargs in kwargss:
            self.pipesparent[i].send([func, kwargs])
            self.outstanding += 1
            # round robin over workers
            i = i + 1 if i + 1 < len(self.subprocs) else 0

    def results(self) -> Generator[Tuple[Mapping[str, Any], Any], None, None]:
        pipe: Connection
        while self.outstanding:
            for pipe in multiprocessing.connection.wait(self.pipesparent):  # type: ignore
                message = pipe.recv()
                if message == SENTINEL:
                    self.outstanding -= 1
                    continue
                assert len(message) == 3, f"expected 3 got {message}"
                kwargs, result, error = message
                if error is not None:
                    # the context manager cleans up the workers
                    raise error from error
                yield kwargs, result

    @staticmethod
    def _run_pool_child(pipe: Connection) -> None:
        while True:
            pipe.poll(None)
            message = pipe.recv()
            if message == SENTINEL:
                break
            func, kwargs = message
            try:
                result = func(**kwargs)
            except Exception as e:
                pipe.send([kwargs, None, e])
            else:
                pipe.send([kwargs, result, None])
            # one sentinel per finished call
            pipe.send(SENTINEL)


RunPool = Union[SerialRunPool, MultiprocessRunPool]


def run_pool(jobs: int) -> RunPool:
    """serial for a single job, otherwise one worker process per job"""
    if jobs <= 1:
        return SerialRunPool()
    return MultiprocessRunPool(jobs)
