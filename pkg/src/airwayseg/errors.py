"""Exception types raised across the pipeline."""


class AirwaySegError(Exception):
    """Base class for all package errors."""


class DataIntegrityError(AirwaySegError, ValueError):
    """Voxel data violates a basic invariant (non-finite values, bad spacing)."""


class AlignmentError(AirwaySegError, ValueError):
    """Two grids that must share shape/spacing do not."""


class CoverageError(AirwaySegError, ValueError):
    """Stitched patches leave voxels of the target grid uncovered."""


class ParseError(AirwaySegError, ValueError):
    """A volume container or checkpoint could not be parsed.

    ``field`` names the offending header field when one is known.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ContractError(AirwaySegError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigurationError(AirwaySegError, ValueError):
    """A configuration is invalid or cannot be realised."""


class DivergenceError(AirwaySegError, RuntimeError):
    """Training produced a non-finite loss."""
