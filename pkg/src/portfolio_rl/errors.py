"""Exception hierarchy; the CLI maps each family to an exit code."""


class PortfolioError(Exception):
    exit_code = 1


class ConfigError(PortfolioError, ValueError):
    """A configuration or precondition violation found before any work starts."""

    exit_code = 1


class DataError(PortfolioError):
    """Missing, malformed, or insufficient market data."""

    exit_code = 2


class FetchError(DataError):
    """Network failure talking to a chart-data endpoint; safe to retry."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class ParseError(DataError):
    def __init__(self, message: str, field: str):
        super().__init__(f"{message}: field {field!r}")
        self.field = field


class NumericalError(PortfolioError, ArithmeticError):
    exit_code = 3


class DomainError(NumericalError, ValueError):
    """An argument outside the mathematical domain of an accounting formula."""


class ConvergenceError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    """A metric with no finite value for the given input (e.g. zero-variance Sharpe)."""


class ShapeError(PortfolioError, ValueError):
    exit_code = 3
