"""Error types shared across the package.

The CLI maps ConfigurationError to exit code 2 and runtime aborts
(including NonFiniteLossError) to exit code 3.
"""


class CilforgeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CilforgeError, ValueError):
    """A config value, preset or structural parameter is invalid."""


class InputError(CilforgeError, ValueError):
    """A runtime input (batch shape, label range, file) is invalid."""


class StateError(CilforgeError, RuntimeError):
    """An operation was called in a state that cannot support it."""


class NonFiniteLossError(CilforgeError, RuntimeError):
    """A training step produced a NaN/Inf loss term.

    Carries the offending term name plus phase/step for diagnostics.
    """

    def __init__(self, term: str, phase: int, epoch: int, step: int):
        self.term = term
        self.phase = phase
        self.epoch = epoch
        self.step = step
        super().__init__(
            f"non-finite loss term '{term}' at phase {phase}, epoch {epoch}, step {step}"
        )
