"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config/usage -> 1,
data -> 2, numerical -> 3), so raise the most specific type that fits.
"""


class AvatrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AvatrError):
    """Invalid configuration: unknown key, bad value, incompatible geometry."""


class ShapeError(AvatrError):
    """Operands with non-conforming shapes fed to a tensor op."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(AvatrError):
    """Bad input data: malformed WAV, empty signal, manifest violations."""


class CheckpointError(DataError):
    """Unreadable or incompatible checkpoint file."""


class NumericalError(AvatrError):
    """Non-finite values where finite ones are required (e.g. diverged loss)."""
