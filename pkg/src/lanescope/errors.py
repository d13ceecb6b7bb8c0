"""Domain exception types shared across the package.

Every error the library raises on bad data or bad requests derives from
:class:`LanescopeError`, so callers (and the CLI) can catch one base class.
Programming mistakes (wrong argument types, broken invariants in code we
control) still surface as ``ValueError``/``TypeError``.
"""


class LanescopeError(Exception):
    """Base class for all domain errors raised by lanescope."""


# ingest ---------------------------------------------------------------

class MissingColumn(LanescopeError):
    def __init__(self, name: str):
        super().__init__(f"required column missing: {name!r}")
        self.name = name


class ParseError(LanescopeError):
    def __init__(self, row: int, column: str, message: str = ""):
        detail = f" ({message})" if message else ""
        super().__init__(f"row {row}, column {column!r}: unparseable{detail}")
        self.row = row
        self.column = column


class EmptyInput(LanescopeError):
    """Input source contains no data rows."""


class AmbiguousHeading(LanescopeError):
    """Trajectory mean longitudinal velocity is exactly zero."""


class RateMismatch(LanescopeError):
    """Source frame rate is not an integer multiple of the target rate."""


class NoLaneChange(LanescopeError):
    """Trajectory never changes lane id."""


class MultipleLaneChanges(LanescopeError):
    """Trajectory changes lane id more than once; split it first."""


# synth ----------------------------------------------------------------

class SpecError(LanescopeError):
    """Scenario specification is internally inconsistent."""


# field ----------------------------------------------------------------

class SingularGram(LanescopeError):
    """Gram matrix cannot be factorized (duplicated or missing observations)."""


# codec ----------------------------------------------------------------

class ShapeError(LanescopeError):
    """Array does not have the shape an operation requires."""


class EmptyDataset(LanescopeError):
    """Training requested on an empty dataset."""


class RankDeficient(LanescopeError):
    """Dataset does not span enough directions for the requested projection."""


class LengthMismatch(LanescopeError):
    """Two aligned sequences have different lengths."""


# bnp ------------------------------------------------------------------

class NumericalUnderflow(LanescopeError):
    """Every state assigns zero density to an observation (non-finite input?)."""


# cli ------------------------------------------------------------------

class ConfigError(LanescopeError):
    """Configuration file or override is malformed (usage error, exit 2)."""


class PathNotFound(LanescopeError):
    def __init__(self, path):
        super().__init__(f"input path not found: {path}")
        self.path = str(path)
