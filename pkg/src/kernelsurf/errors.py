"""Exception and warning types shared across the package.

Every error carries a stable ``code`` string so the CLI can emit
machine-parsable failures.
"""


class KernelSurfError(Exception):
    code = "Error"


class IoError(KernelSurfError):
    code = "IoError"


class ParseError(KernelSurfError):
    code = "ParseError"


class EmptyInput(KernelSurfError):
    code = "EmptyInput"


class TooFewPoints(KernelSurfError):
    code = "TooFewPoints"


class InvalidConfig(KernelSurfError):
    code = "InvalidConfig"


class DimensionMismatch(KernelSurfError):
    code = "DimensionMismatch"


class SizeMismatch(KernelSurfError):
    code = "SizeMismatch"


class EmptyReference(KernelSurfError):
    code = "EmptyReference"


class EmptyMesh(KernelSurfError):
    code = "EmptyMesh"


class InvalidFit(KernelSurfError):
    code = "InvalidFit"


class FormatError(KernelSurfError):
    code = "FormatError"


class AllChunksFailed(KernelSurfError):
    code = "AllChunksFailed"


class DegenerateNeighborhoodWarning(UserWarning):
    """All neighbors of a point were coincident; an arbitrary normal was emitted."""


class SingularDiagonalWarning(UserWarning):
    """A zero entry in the Jacobi preconditioner diagonal was replaced by 1."""


class EmptySupportWarning(UserWarning):
    """Input points fell outside the support of every basis function."""


class EmptyFieldWarning(UserWarning):
    """The implicit field has no sign change; extraction produced no triangles."""


class ChunkFailedWarning(UserWarning):
    """A chunk solve did not converge and was excluded from the merge."""
