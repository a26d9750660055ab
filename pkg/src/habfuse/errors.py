"""Exception types shared across the pipeline."""


class HabfuseError(Exception):
    """Base class for all library errors."""


class GridMismatchError(HabfuseError):
    """Rasters that must share a grid (or date) do not."""


class SceneFormatError(HabfuseError):
    """A binary container is malformed: bad magic, truncation, size mismatch."""


class ConfigError(HabfuseError):
    """Pipeline configuration is invalid. Carries one message per problem."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MissingInputError(HabfuseError):
    """A stage input artifact does not exist; message names the path."""
