"""Exception hierarchy shared across the package."""


class RosamError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RosamError):
    """A configuration value violates an invariant. Names the offending field."""


class InputError(RosamError):
    """An operation received inputs with incompatible shapes, frames, or kinds."""


class StateError(RosamError):
    """An operation was applied to a model state in the wrong phase (e.g. double LoRA injection)."""


class IngestionError(RosamError):
    """A dataset record could not be loaded or validated. Names the record."""


class CheckpointError(RosamError):
    """A checkpoint file is corrupt or has an unsupported version."""
