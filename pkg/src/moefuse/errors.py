"""Exception hierarchy shared by every moefuse module."""


class MoeFuseError(Exception):
    """Base class for all engine errors."""


class DimensionMismatch(MoeFuseError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyInput(MoeFuseError):
    """An operation received an empty vector, prompt, or batch."""


class KOutOfRange(MoeFuseError):
    """Requested top-k is outside 1..len(values)."""


class InvariantViolation(MoeFuseError):
    """An internal consistency rule was broken (non-finite data, manifest drift)."""


class CheckpointIOError(MoeFuseError):
    """Reading or writing checkpoint files failed at the OS level."""


class FormatError(MoeFuseError):
    """Checkpoint manifest is malformed or has an unsupported version."""


class ShapeError(MoeFuseError):
    """Tensor blob does not match the shapes declared in the manifest."""


class ShapeMismatch(MoeFuseError):
    """Expert checkpoints disagree on a parameter shape beyond the alignment policy."""


class ConfigError(MoeFuseError):
    """Composition config violates its invariants.

    Carries the structured diagnostics so CLI and tests can report per-field.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(f"{d.field}: {d.message}" for d in self.diagnostics)
        super().__init__(lines or "invalid config")


class MissingExpert(MoeFuseError):
    """An expert checkpoint named in the config could not be loaded."""


class TokenOutOfVocab(MoeFuseError):
    """A token id is outside the model vocabulary."""


class ModeMismatch(MoeFuseError):
    """Operation is not defined for the model's routing mode."""
