# errors.py
"""
Exception hierarchy shared by the solvers and the command line.

Each class carries the process exit code the CLI reports for it.
"""


class PopflowError(Exception):
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": self.message, **self.details}


class SchemaError(PopflowError, ValueError):
    """Config or file schema violation."""
    exit_code = 2


class TreeValidationError(SchemaError):
    def __init__(self, report):
        super().__init__(f"Invalid tree: {report.kind} ({report.message})",
                         kind=report.kind, node=report.node, edge=report.edge)
        self.report = report


class DomainError(PopflowError, ValueError):
    """Numerical input outside an operation's domain."""
    exit_code = 2


class ConvergenceError(PopflowError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, residual: float, iterations: int, **details):
        super().__init__(message, residual=float(residual), iterations=int(iterations), **details)
        self.residual = float(residual)
        self.iterations = int(iterations)


class UnderflowError(ConvergenceError):
    pass


class StagnationError(ConvergenceError):
    pass


class StorageError(PopflowError, OSError):
    exit_code = 4
