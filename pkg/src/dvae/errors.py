"""Exception types shared across the package."""


class DvaeError(Exception):
    """Base class for all package errors."""


class DimensionError(DvaeError, ValueError):
    """Shape or length mismatch between related tensors."""


class NumericError(DvaeError, ValueError):
    """Non-finite or otherwise invalid numeric input."""


class ConfigError(DvaeError, ValueError):
    """Invalid configuration value or combination."""


class DegeneratePoseError(DvaeError, ValueError):
    """Pose cannot be canonicalized (zero reference bone, collinear joints)."""


class GenerationError(DvaeError, ValueError):
    """Scene parameters outside the generator's limits."""


class ManifestError(DvaeError, ValueError):
    """Corrupt or malformed dataset manifest; message carries line/record info."""


class FormatError(DvaeError, ValueError):
    """External annotation file does not match its declared schema."""


class SupervisionError(DvaeError, ValueError):
    """Required labels are missing under the active supervision policy."""


class DivergenceError(DvaeError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_checkpoint`` holds the path of the most recent good checkpoint,
    or None if none was written yet.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(DvaeError, RuntimeError):
    """Checkpoint is unreadable or incompatible with the requested specs."""
