"""Exception hierarchy shared by the whole package.

Three families matter to callers:

* ``ShapeError`` -- an operation was handed arrays whose shapes cannot be
  composed.  Always a programming error at the call site.
* ``DataError`` -- bad on-disk data (wrong magic, truncated file, malformed
  manifest row, missing cohort, degenerate statistics).  The command line
  maps these to exit code 2.
* ``NumericalDiagnosticError`` -- an internal numerical guard tripped
  (piece-count cap, observation not covered by its truncation set, vanishing
  truncation mass).  These indicate a fault worth investigating rather than
  a bad input; exit code 3.
"""


class SiadError(Exception):
    """Base class for all package errors."""


class ShapeError(SiadError):
    """Array shapes cannot be composed by the requested operation."""


class DataError(SiadError):
    """Invalid or degenerate input data."""


class MagicMismatchError(DataError):
    """A binary file does not start with the expected magic bytes."""


class VersionMismatchError(DataError):
    """A binary file declares an unsupported format version."""


class TruncatedFileError(DataError):
    """A binary file ended before all declared payload bytes."""


class ManifestError(DataError):
    """A CSV manifest has a bad header or a malformed row."""


class DegenerateMaskError(SiadError):
    """Anomaly mask is empty or covers the whole ROI; no hypothesis exists."""


class NumericalDiagnosticError(SiadError):
    """A numerical guard tripped; results would not be trustworthy."""
