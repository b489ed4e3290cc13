"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: config errors exit 2,
runtime failures (bad files, divergence, IO) exit 1, gradient-check
failures exit 3.
"""


class ClipKdError(Exception):
    """Base class for all package errors."""


class InputError(ClipKdError):
    """Invalid runtime input: shape mismatch, empty batch, bad argument."""


class ConfigError(ClipKdError):
    """Invalid or inconsistent configuration detected before/at wiring time."""


class FormatError(ClipKdError):
    """Malformed binary file (embedding dump or checkpoint).

    Carries a byte offset when the corruption site is known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(ClipKdError):
    """Training produced a non-finite loss; records the last finite step."""

    def __init__(self, step: int, last_finite_step: int):
        super().__init__(
            f"non-finite loss at step {step}; last finite step was {last_finite_step}"
        )
        self.step = step
        self.last_finite_step = last_finite_step
