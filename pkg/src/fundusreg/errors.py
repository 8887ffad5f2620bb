"""Exception hierarchy shared by the registration pipeline."""


class RegistrationError(Exception):
    """Base class; ``status`` is the report status string for this failure."""

    status = "error"


class ImageLoadError(RegistrationError):
    status = "io-error"


class NoFOVError(RegistrationError):
    status = "no-fov"


class InsufficientFeatures(RegistrationError):
    status = "insufficient-features"


class InsufficientMatches(RegistrationError):
    status = "insufficient-matches"


class DegenerateConfiguration(RegistrationError):
    status = "degenerate"


class DistortionSingularity(RegistrationError):
    status = "degenerate"


class OutsideInvertibleRange(RegistrationError):
    status = "degenerate"


class ReflectionError(RegistrationError):
    status = "degenerate"
