"""Exception hierarchy shared by the library and mapped to CLI exit codes."""


class HamctlError(Exception):
    exit_code = 1


class InputError(HamctlError, ValueError):
    """Malformed or inconsistent input (exit code 2)."""

    exit_code = 2


class RangeError(InputError):
    """A point or index outside the region covered by a mesh or grid."""


class BoundaryError(HamctlError):
    """A point lies on a cube face, a measure-zero set the caller must handle."""

    exit_code = 3


class PreconditionError(HamctlError):
    """A mathematical precondition of a construction does not hold (exit code 3)."""

    exit_code = 3


class NotEquivalentError(PreconditionError):
    """Two densities have different level-set signatures."""


class GeometryError(PreconditionError):
    """A compiled primitive would collide with another cube or leave its support."""

    def __init__(self, message, indices=None, max_width=None):
        super().__init__(message)
        self.indices = indices
        self.max_width = max_width


class NumericError(HamctlError):
    """Numerical failure: blow-up, non-convergence, rank deficiency (exit code 4)."""

    exit_code = 4


class CompletenessError(NumericError):
    """A trajectory left the configured safety box."""
