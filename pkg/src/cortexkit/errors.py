"""Exception hierarchy shared by every cortexkit module."""


class CortexKitError(Exception):
    """Base class for all cortexkit errors."""


class InputError(CortexKitError):
    """Problems with files or user-supplied data (CLI exit code 1)."""


class NumericalError(CortexKitError):
    """Failures of a numerical stage (CLI exit code 2)."""


class FormatError(InputError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class IoFailure(InputError, OSError):
    pass


class MalformedOff(InputError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(InputError, ValueError):
    pass


class BadLaterality(InputError, ValueError):
    pass


class EmptyVolume(InputError, ValueError):
    pass


class MissingWhiteMatter(NumericalError):
    pass


class ShapeMismatch(CortexKitError, ValueError):
    pass


class ProbNotNormalized(CortexKitError, ValueError):
    pass


class EmptyMask(NumericalError, ValueError):
    pass


class NonManifold(NumericalError):
    def __init__(self, message, edge=None):
        if edge is not None:
            message = f"{message}: edge {tuple(int(i) for i in edge)}"
        super().__init__(message)
        self.edge = edge


class SolverNoConvergence(NumericalError):
    pass


class MultiComponent(SolverNoConvergence):
    """Laplacian kernel has dimension > 1 (mesh is not connected)."""


class DegenerateOrientation(NumericalError):
    pass


class ZeroEmbeddingVector(NumericalError):
    def __init__(self, vertex):
        super().__init__(f"spectral embedding vanishes at vertex {vertex}")
        self.vertex = vertex


class OutOfBounds(InputError, ValueError):
    pass


class EmptyMesh(InputError, ValueError):
    pass


class GridMismatch(CortexKitError, ValueError):
    pass


class EmptySet(CortexKitError, ValueError):
    pass


class DegenerateVariance(NumericalError, ValueError):
    pass


class RankDeficient(NumericalError, ValueError):
    pass


class TooFewPairs(CortexKitError, ValueError):
    pass
