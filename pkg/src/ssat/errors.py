"""Exception types raised across the package."""


class SSATError(Exception):
    """Base class for all package errors."""


class UnknownTemplateError(SSATError, ValueError):
    pass


class ScenarioError(SSATError, ValueError):
    """A scene violates a structural invariant."""


class IngestError(SSATError, ValueError):
    """A flat file could not be turned into scenes.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None, scene_id: str | None = None):
        self.line = line
        self.scene_id = scene_id
        prefix = []
        if scene_id is not None:
            prefix.append(f"scene {scene_id}")
        if line is not None:
            prefix.append(f"line {line}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)


class LengthMismatchError(SSATError, ValueError):
    pass


class DegenerateTrajectoryError(SSATError, ValueError):
    """Every consecutive waypoint pair coincides, so no heading exists."""


class EmptyInputError(SSATError, ValueError):
    pass


class WidthMismatchError(SSATError, ValueError):
    pass


class NonFiniteError(SSATError, FloatingPointError):
    pass


class StructureMismatchError(SSATError, ValueError):
    """Two scenes expected to share structure do not."""


class CheckpointError(SSATError):
    """Checkpoint file is malformed or has an incompatible schema."""
