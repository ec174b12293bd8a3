"""Exception types shared across the package."""


class XModalError(Exception):
    """Base class for package-specific failures."""


class DimensionError(XModalError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(XModalError, ValueError):
    """A vector that must have positive norm is (numerically) zero."""


class EvaluationError(XModalError, ValueError):
    """A function produced a non-finite value where a finite one is required."""


class ProtocolError(XModalError, ValueError):
    """Dataset layout violates a pair-generation protocol precondition."""


class FormatError(XModalError, ValueError):
    """A binary file does not match the expected on-disk layout.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(XModalError, ValueError):
    """A dataset manifest failed validation.

    ``violations`` is a list of (category, message) pairs covering every
    problem found, not just the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"[{cat}] {msg}" for cat, msg in self.violations]
        super().__init__("manifest validation failed:\n" + "\n".join(lines))


class DivergedTrainingError(XModalError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, message="non-finite training loss"):
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
