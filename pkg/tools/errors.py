from typing import Any, Dict, Optional


class LabException(Exception):
    """Base exception for every failure the laboratory reports.

    Carries a human readable message and an optional structured detail,
    which are returned together in the error field of a command response.
    """

    exit_code = 3

    def __init__(self, message: str, detail: Optional[Any] = None, *args) -> None:
        super().__init__(message, *args)
        self.message = message
        self.detail = detail

    def __reduce__(self):
        # Subclasses take extra constructor arguments; rebuild from state.
        return (_restore, (type(self), self.__dict__))

    @property
    def error_dict(self) -> Dict[str, Any]:
        error: Dict[str, Any] = {"message": self.message}

        if self.detail is not None:
            error["detail"] = self.detail

        return error


class ConfigurationError(LabException):
    """Invalid hyperparameters, defense specs or tap selections."""

    exit_code = 2


class ShapeError(LabException):
    """Tensor ranks or extents do not match what an operation needs."""


class NumericError(LabException):
    """Non-finite values or a numerical routine that did not converge."""


class TrainingError(LabException):
    """A training run diverged."""

    def __init__(self, message: str, epoch: int, *args) -> None:
        super().__init__(message, {"epoch": epoch}, *args)
        self.epoch = epoch


class FormatError(LabException):
    """A tensor or image file is corrupt or truncated."""

    exit_code = 4


class GridCellError(LabException):
    """A defense grid cell failed; completed rows were kept."""

    def __init__(self, cell: str, cause: Exception, *args) -> None:
        detail = cause.error_dict if isinstance(cause, LabException) else str(cause)
        super().__init__(f"Grid cell '{cell}' failed.", detail, *args)
        self.cell = cell
        self.cause = cause

        if isinstance(cause, LabException):
            self.exit_code = cause.exit_code


def _restore(cls: type, state: Dict[str, Any]) -> LabException:
    error = cls.__new__(cls)
    Exception.__init__(error, state.get("message", ""))
    error.__dict__.update(state)
    return error
