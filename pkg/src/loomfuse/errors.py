from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int | None = None
    column: int | None = None
    kind: str = "error"

    def __str__(self) -> str:
        where = ""
        if self.line is not None:
            where = f"line {self.line}"
            if self.column is not None:
                where += f", col {self.column}"
            where += ": "
        return f"{where}{self.message}"


class LoomfuseError(Exception):
    """Base class for user-facing pipeline errors."""

    def __init__(self, message: str, diagnostics: list[Diagnostic] | None = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class SpecError(LoomfuseError):
    pass


class InferenceError(LoomfuseError):
    pass


class CycleError(LoomfuseError):
    def __init__(self, message: str, witness: list):
        super().__init__(message)
        self.witness = witness


class LoweringError(LoomfuseError):
    pass


class ExecutionError(LoomfuseError):
    pass
