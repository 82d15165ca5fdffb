"""Exception types shared across the package."""


class Canon3dError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(Canon3dError, ValueError):
    pass


class SymmetryViolationError(Canon3dError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"vertex {index} has no mirror partner across x = 0")


class DegenerateMeshError(Canon3dError):
    pass


class DegenerateRotationError(Canon3dError):
    pass


class InvalidGeometryError(Canon3dError):
    pass


class DataValidationError(Canon3dError):
    pass


class NumericalError(Canon3dError):
    """Raised when a loss or gradient becomes non-finite."""


class CompatibilityError(Canon3dError):
    pass


class MissingAdjointError(Canon3dError):
    def __init__(self, primitive):
        self.primitive = primitive
        super().__init__(f"no adjoint registered for primitive '{primitive}'")
