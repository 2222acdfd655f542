# Error types shared by the library and the CLI
# Each error carries the exit code the CLI reports for it

from typing import Optional


class RBNetError(Exception):
    """Base error: a human-readable detail plus a stable exit code."""

    exit_code = 1

    def __init__(self, detail: str, **context):
        super().__init__(detail)
        self.detail = detail
        self.context = context
        # index / layer / species_id / reaction_id / field, when supplied
        for key, value in context.items():
            setattr(self, key, value)

    def __str__(self) -> str:
        return self.detail


class ConfigError(RBNetError):
    """Usage or configuration problem (bad flag, unknown key, invalid value)."""

    exit_code = 1


class DataError(RBNetError):
    """Input data violates a precondition (negative density, missing species, ...)."""

    exit_code = 2


class NumericalError(RBNetError):
    """Non-finite values or divergence during a computation."""

    exit_code = 3


def exit_code_for(error: Optional[BaseException]) -> int:
    """Map an exception to the CLI exit code contract (0 when there is none)."""
    if error is None:
        return 0
    if isinstance(error, RBNetError):
        return error.exit_code
    return 1
