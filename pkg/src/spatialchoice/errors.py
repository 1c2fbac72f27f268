"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and graph
problems exit 2, numerical failures exit 3.
"""


class SpatialChoiceError(Exception):
    """Base class for all package errors."""


class GraphError(SpatialChoiceError):
    """Invalid graph construction or query: bad index, self-loop, isolated node."""


class DataError(SpatialChoiceError):
    """Malformed input file, missing column, or invalid dataset value."""


class ConfigError(SpatialChoiceError):
    """Inconsistent model or run configuration."""


class ShapeError(SpatialChoiceError):
    """Incompatible tensor shapes in a numerical expression."""


class NumericalError(SpatialChoiceError):
    """Non-finite value, divergence, or singular matrix."""


class LineSearchError(NumericalError):
    """Backtracking line search failed to find an acceptable step."""
