class SlidewatchError(Exception):
    """Base class for every error raised by the monitoring pipeline."""


class ParameterError(SlidewatchError, ValueError):
    pass


# cloud I/O and indexing

class ParseError(SlidewatchError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CloudFormatError(SlidewatchError):
    pass


class EmptyCloudError(SlidewatchError):
    pass


# registration

class DegenerateCorrespondences(SlidewatchError):
    pass


class NoOverlap(SlidewatchError):
    pass


class InsufficientGeometry(SlidewatchError):
    pass


class DisconnectedViews(SlidewatchError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        super().__init__(f"similarity graph is disconnected: components {components}")


# ground filtering

class TooSparse(SlidewatchError):
    pass


class InvalidPlane(SlidewatchError):
    pass


class NoConvergence(SlidewatchError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"cloth did not settle after {iterations} iterations (max step {residual:.4g} m)")


# terrain and deformation

class DegenerateSurface(SlidewatchError):
    pass


class EmptyMeshError(SlidewatchError):
    pass


class NoValidValues(SlidewatchError):
    pass


# analysis

class UndefinedMotionVector(SlidewatchError):
    pass


class ReportError(SlidewatchError):
    pass


class PipelineStageError(SlidewatchError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
