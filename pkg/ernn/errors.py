"""Exception hierarchy shared by the library and the CLI.

Every error carries a message, an optional hint for the user and the exit code
the CLI returns when the error escapes a command.
"""

from __future__ import annotations


class ErnnError(Exception):
    exit_code = 2

    def __init__(self, message: str, *, hint: str | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.hint = hint


class UsageError(ErnnError):
    exit_code = 1


class ValidationError(ErnnError):
    """Structural problem with an input; `errors` lists every problem found."""

    def __init__(
        self, message: str, errors: list[str] | None = None, *, hint: str | None = None
    ) -> None:
        super().__init__(message, hint=hint)
        self.errors = list(errors or [])

    def __str__(self) -> str:
        if not self.errors:
            return self.message
        return self.message + "\n" + "\n".join(f"  • {e}" for e in self.errors)


class ShapeError(ValidationError):
    pass


class LedgerError(ValidationError):
    pass


class TopologyError(ValidationError):
    pass


class QuantizationError(ErnnError):
    pass


class CalibrationError(ErnnError):
    def __init__(
        self, message: str, missing: list[str] | None = None, *, hint: str | None = None
    ) -> None:
        super().__init__(message, hint=hint)
        self.missing = sorted(missing or [])

    def __str__(self) -> str:
        if not self.missing:
            return self.message
        return f"{self.message}: {', '.join(self.missing)}"


class ModelFormatError(ErnnError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class MissingTensorError(ModelFormatError):
    pass


class NumericError(ErnnError):
    exit_code = 3

    def __init__(
        self,
        message: str,
        *,
        layer: str | None = None,
        step: int | None = None,
        hint: str | None = None,
    ) -> None:
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message, hint=hint)
        self.layer = layer
        self.step = step
