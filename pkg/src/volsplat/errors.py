"""Exception types raised across the package."""


class VolsplatError(Exception):
    pass


class InvalidParameterError(VolsplatError, ValueError):
    pass


class SingularMatrixError(VolsplatError, ValueError):
    pass


class ParseError(VolsplatError, ValueError):
    """Malformed input file. ``location`` names the offending line or byte offset."""

    def __init__(self, path, location, message):
        self.path = str(path)
        self.location = location
        super().__init__(f"{self.path} ({location}): {message}")


class UnsupportedModelError(VolsplatError, ValueError):
    def __init__(self, model, supported):
        self.model = model
        super().__init__(
            f"unsupported camera model {model!r}; supported: {', '.join(supported)}")
