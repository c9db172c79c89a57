"""Exception hierarchy shared by every dlgmoe package."""

from __future__ import annotations

from collections.abc import Sequence


class DlgMoeError(Exception):
    """Base class for all errors raised by dlgmoe."""


class DimensionError(DlgMoeError, ValueError):
    """Raised when tensor shapes do not agree."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = "") -> None:
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = ", ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ContractError(DlgMoeError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class NumericalError(DlgMoeError, ArithmeticError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str) -> None:
        self.op = op
        super().__init__(f"{op} produced non-finite values")


class ConfigError(DlgMoeError, ValueError):
    """Raised when a configuration is invalid."""


class AlignmentInfeasibleError(DlgMoeError):
    """Raised when a label sequence cannot be aligned to the available frames."""

    def __init__(self, n_frames: int, n_required: int) -> None:
        self.n_frames = n_frames
        self.n_required = n_required
        super().__init__(
            f"CTC alignment needs at least {n_required} frames, got {n_frames}"
        )


class DivergenceError(DlgMoeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, components: dict[str, float]) -> None:
        self.step = step
        self.components = components
        rendered = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"Training diverged at step {step}: {rendered}")


class CheckpointError(DlgMoeError):
    """Raised when a checkpoint or dataset container cannot be read."""
