"""Exception types shared across the package."""


class PairfuseError(Exception):
    """Base class for errors raised by pairfuse."""


class ConfigError(PairfuseError):
    """Invalid configuration file, unknown key, or bad flag value."""


class ManifestError(PairfuseError):
    """Missing or malformed dataset manifest."""


class CheckpointMismatchError(PairfuseError):
    """Checkpoint was written under an incompatible configuration."""


class TrainingDivergedError(PairfuseError):
    """Loss or a gradient became non-finite during optimization."""
