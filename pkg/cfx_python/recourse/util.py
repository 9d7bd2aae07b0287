import logging
from typing import TYPE_CHECKING, List, Optional

if TYPE_CHECKING:
    from cfx_python.types import CounterfactualSet

# name the logger after the package to make it simple to disable for packages using this one as a dependency
logger = logging.getLogger("recourse")


class SchemaError(ValueError):
    pass


class RowValidationError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None, feature: str = ""):
        self.row = row
        self.feature = feature
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class PreconditionError(ValueError):
    pass


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class RuleValidationError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class NotEnoughValidError(Exception):
    def __init__(self, message: str, partial: "CounterfactualSet"):
        self.partial = partial
        super().__init__(message)
