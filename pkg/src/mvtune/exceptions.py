import typing as T

# Exit codes shared by the management commands.
EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INVALID_INPUT = 3
EXIT_IO = 4


class MvtuneError(Exception):
    """Base class for every error raised by mvtune."""

    exit_code: int = EXIT_INVALID_INPUT


class InvalidInputError(MvtuneError):
    pass


class InvalidQueryError(InvalidInputError):
    pass


class UnusableIndexError(InvalidInputError):
    """An index was used for a query whose columns do not contain the index's."""


class DimensionMismatchError(InvalidInputError):
    pass


class ConfigurationError(MvtuneError):
    pass


class TrainingError(MvtuneError):
    pass


class IndexBuildError(MvtuneError):
    pass


class MissingIndexError(MvtuneError):
    pass


class FormatError(MvtuneError):
    exit_code = EXIT_IO


class InfeasiblePlanError(MvtuneError):
    exit_code = EXIT_INFEASIBLE


class InfeasibleWorkloadError(MvtuneError):
    """
    No configuration satisfies the workload's constraints. ``constraint`` names the
    tightest violated constraint ("storage" or "recall"), ``detail`` carries the
    numbers behind it.
    """

    exit_code = EXIT_INFEASIBLE

    def __init__(
        self,
        message: str,
        constraint: str,
        detail: T.Optional[T.Dict[str, T.Any]] = None,
    ):
        super().__init__(message)
        self.constraint = constraint
        self.detail = detail or {}
