"""Exception hierarchy for the eqgraph package.

The CLI maps these onto exit codes: data/format problems exit with 2,
build or match failures exit with 3.
"""


class EqGraphError(Exception):
    """Base class for all eqgraph errors."""


class DimensionError(EqGraphError):
    """Vector or point has the wrong dimensionality."""


class KindMismatchError(EqGraphError):
    """A displacement of the wrong kind was applied (identity vs expression)."""


class DegenerateGeometryError(EqGraphError):
    """Rigid fitting received too few or geometrically degenerate points."""


class CorrespondenceError(EqGraphError):
    """Two ensembles could not be corresponded."""


class GraphBuildError(EqGraphError):
    """Model construction failed (no usable equivalence sets, bad input...)."""


class DisconnectedGraphError(GraphBuildError):
    """Spectral bipartition was asked to split a disconnected graph."""


class BridgingError(GraphBuildError):
    """An equivalence set has no neutral member to act as bridging vertex."""


class GateError(EqGraphError):
    """No valid entrance/exit gate combination exists for a descriptor pair."""


class DataFormatError(EqGraphError):
    """A data file (JSONL descriptors, CSV labels/matrix) is malformed."""


class ModelFormatError(EqGraphError):
    """A model file is truncated, corrupted, or of an unsupported version."""


class ConfigError(EqGraphError):
    """Invalid configuration (synthetic world config, parameter values)."""
