"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input records failed validation; ``problems`` lists every offending line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) if self.problems else "validation failed")


class FormatError(ValueError):
    """A binary or text artifact does not match its declared format."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class UndefinedMetricError(ValueError):
    """A metric cannot be computed for the given labels or annotations."""


class IncompatibleArtifactError(ValueError):
    """Two artifacts that must agree (e.g. region map and model set) do not."""
