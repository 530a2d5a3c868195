from __future__ import annotations

import enum
from typing import Callable, List, Optional, Tuple, Type

from pydantic import ValidationError
from typing_extensions import TypedDict

from coop_mpc._utils import CoopMpcError
from coop_mpc.cooperation import GraphError
from coop_mpc.ocp import Infeasible


class ExitStatus(enum.IntEnum):
    OK = 0
    INFEASIBLE = 2
    CONFIG = 3
    IO = 4


class ScenarioError(CoopMpcError):
    """A scenario could not be resolved, parsed or validated."""


class ScenarioParseError(ScenarioError):
    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class ScenarioValidationError(ScenarioError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ErrorReport(TypedDict):
    status: int
    type: str
    message: str
    agent: Optional[int]
    time: Optional[int]


class ErrorFormatters:
    """Formatters turning an exception into an exit status and a report.

    Args:
        exc (BaseException): the raised exception

    Returns:
        Tuple[int, ErrorReport]: exit status and report
    """

    @staticmethod
    def infeasible(exc: BaseException) -> Tuple[int, ErrorReport]:
        assert isinstance(exc, Infeasible)
        return ExitStatus.INFEASIBLE, ErrorReport(
            status=ExitStatus.INFEASIBLE,
            type="infeasible",
            message=str(exc),
            agent=exc.agent,
            time=exc.time,
        )

    @staticmethod
    def config(exc: BaseException) -> Tuple[int, ErrorReport]:
        return ExitStatus.CONFIG, ErrorReport(
            status=ExitStatus.CONFIG,
            type="config",
            message=str(exc),
            agent=None,
            time=None,
        )

    @staticmethod
    def io(exc: BaseException) -> Tuple[int, ErrorReport]:
        message = str(exc)
        if isinstance(exc, OSError) and exc.filename is not None:
            message = f"{exc.strerror or exc}: {exc.filename}"
        return ExitStatus.IO, ErrorReport(
            status=ExitStatus.IO,
            type="io",
            message=message,
            agent=None,
            time=None,
        )


_FORMATTERS: List[Tuple[Type[BaseException], Callable[[BaseException], Tuple[int, ErrorReport]]]] = [
    (Infeasible, ErrorFormatters.infeasible),
    (ScenarioError, ErrorFormatters.config),
    (GraphError, ErrorFormatters.config),
    (ValidationError, ErrorFormatters.config),
    (OSError, ErrorFormatters.io),
]


def format_error(exc: BaseException) -> Optional[Tuple[int, ErrorReport]]:
    """Exit status and report for a known error, None for anything else."""
    for exc_type, formatter in _FORMATTERS:
        if isinstance(exc, exc_type):
            return formatter(exc)
    return None
