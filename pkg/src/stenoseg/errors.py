"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class DataError(Exception):
    pass


class AnnotationParseError(DataError):
    pass


class DanglingReferenceError(DataError):
    def __init__(self, annotation_id, image_id):
        super().__init__(f"annotation {annotation_id} references missing image id {image_id}")
        self.annotation_id = annotation_id
        self.image_id = image_id


class PolygonError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class FoldError(DataError):
    pass


class SpecError(ValueError):
    """Invalid model specification."""


class FormatError(Exception):
    """Malformed, truncated, or wrong-version binary file."""


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericError(NonFiniteError):
    """A training step produced a non-finite loss or gradient."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter
