"""Exception hierarchy shared across the package."""


class LesionKitError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(LesionKitError):
    """Invalid argument, shape, or domain-invariant violation."""


class FormatError(ValidationError):
    """Malformed LSV1/LSM1 file (bad magic, truncated payload, bad header)."""


class ConfigError(LesionKitError):
    """Inconsistent or unsatisfiable configuration."""


class BundleVersionError(ConfigError):
    """Model bundle written by an incompatible schema version."""


class OrganNotFoundError(LesionKitError):
    """No position in the volume scored above the organ-presence threshold."""


class ContourVanishedError(LesionKitError):
    """Level-set function lost its zero crossing (contour collapsed or filled)."""
