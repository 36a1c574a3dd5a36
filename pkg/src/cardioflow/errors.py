"""Exception hierarchy shared by all cardioflow modules.

Data-shaped problems (bad masks, bad stacks, bad files) and numerical
failures are kept on separate branches so the CLI can map them to
distinct exit codes.
"""


class CardioflowError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CardioflowError):
    """An input value violates a documented range or consistency rule."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(CardioflowError):
    """Malformed or inconsistent input data (masks, stacks, files)."""


class FormatError(DataError):
    """A serialized artifact fails its format check (magic, size, schema)."""


class MissingStructureError(DataError):
    """A required structure code has no pixels in the mask."""

    def __init__(self, code, name):
        self.code = code
        self.name = name
        super().__init__(f"structure {name} (code {code}) has no pixels")


class DegenerateSegmentError(DataError):
    """A myocardial segment has no usable boundary pixels."""

    def __init__(self, segment, message):
        self.segment = segment
        super().__init__(f"segment {segment}: {message}")


class DegenerateGeometryError(DataError):
    """Case geometry cannot support the requested measurement."""


class InsufficientStackError(DataError):
    """Too few slices for the requested stack operation."""


class UnsupportedSequenceError(DataError):
    """The frame sequence is too short to sample."""


class DegenerateTrainingError(DataError):
    """Training data lacks a class or category the model needs."""


class BindingError(DataError):
    """A classifier input feature is absent or non-finite."""

    def __init__(self, feature, message="missing or non-finite"):
        self.feature = feature
        super().__init__(f"feature {feature}: {message}")


class ConfigurationError(CardioflowError):
    """A run configuration is internally inconsistent."""


class NumericalFailureError(CardioflowError):
    """An optimization produced a non-finite value."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
