"""Exception types shared across the package."""


class ContractError(ValueError):
    """Inputs violate a shape or extent precondition."""


class ParameterRangeError(ValueError):
    """A scalar parameter lies outside its admissible range."""


class ImageFormatError(OSError):
    """A raster file exists but is not an 8-bit, 1- or 3-channel PNG."""


class RegistryError(KeyError):
    """Unknown discriminator layer id."""


class FrozenViolationError(RuntimeError):
    """A network that must stay frozen was modified."""


class ConfigError(ValueError):
    """Missing or inconsistent configuration / stage artifacts."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; carries whatever partial state was saved."""

    def __init__(self, message, trace=None, checkpoint=None):
        super().__init__(message)
        self.trace = trace
        self.checkpoint = checkpoint
