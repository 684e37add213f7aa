"""Exception types shared across the package."""


class HierEnvError(Exception):
    """Base class for all package errors."""


class ContractError(HierEnvError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(HierEnvError, ArithmeticError):
    """A forward op produced NaN/Inf or left its numeric domain."""


class ParseError(HierEnvError, ValueError):
    """An input file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class GradCheckError(HierEnvError):
    """The finite-difference oracle could not be applied (e.g. non-deterministic loss)."""


class DivergenceError(HierEnvError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump_path: str | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")


class DependencyError(HierEnvError):
    """An upstream artifact needed by a command is missing."""

    def __init__(self, missing: str):
        self.missing = missing
        super().__init__(f"missing upstream artifact: {missing}")
