class MamoError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(MamoError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class ValidationError(MamoError, ValueError):
    pass


class StructuralError(MamoError, ValueError):
    """A query tree violates the shape rules of the benchmark grammar."""


class UnsupportedStructureError(StructuralError):
    pass


class SamplingExhaustedError(MamoError, RuntimeError):
    def __init__(self, template_name, attempts):
        self.template_name = template_name
        self.attempts = attempts
        super().__init__(f"could not ground template {template_name!r} after {attempts} attempts")


class ConfigError(MamoError, ValueError):
    pass


class NumericError(MamoError, FloatingPointError):
    pass
