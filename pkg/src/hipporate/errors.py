"""Exception hierarchy. Every error class carries a CLI exit code so the
command layer can map failures to distinct process statuses."""


class HipporateError(Exception):
    exit_code = 1


class ConfigError(HipporateError):
    """Invalid run configuration (unknown key, bad value, bad JSON)."""
    exit_code = 2


class MissingInputError(HipporateError):
    """A referenced file or directory does not exist."""
    exit_code = 3


# -- file / volume format errors (exit 4) -----------------------------------

class FormatError(HipporateError):
    exit_code = 4


class BadMagic(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class UnsupportedDimension(FormatError):
    pass


class TruncatedStream(FormatError):
    pass


class NonFiniteVoxel(FormatError):
    pass


class GridMismatch(FormatError):
    pass


class SchemaMismatch(FormatError):
    """CSV header does not match the expected column list."""
    pass


# -- tensor / model errors (exit 5) ------------------------------------------

class NumericError(HipporateError):
    exit_code = 5


class ShapeMismatch(NumericError):
    pass


class DegenerateBatch(NumericError):
    """Batch statistics undefined (batch-norm in train mode with B < 2)."""
    pass


class ShapeTooSmall(NumericError):
    pass


class KTooLarge(NumericError):
    pass


class LengthMismatch(NumericError):
    pass


class EmptySet(NumericError):
    pass


class DivergedLoss(NumericError):
    """Non-finite training loss; message carries the epoch index."""
    pass


class SingularSystem(NumericError):
    pass


class NonFiniteInput(NumericError):
    pass


class OffGridInput(NumericError):
    pass


# -- statistics errors (exit 6) -----------------------------------------------

class StatsError(HipporateError):
    exit_code = 6


class DegenerateVariance(StatsError):
    pass


class OutOfCategory(StatsError):
    pass


class DegenerateMarginal(StatsError):
    pass


class DegenerateResamples(StatsError):
    pass


# -- cohort errors (exit 7) ----------------------------------------------------

class CohortError(HipporateError):
    exit_code = 7


class EmptySample(CohortError):
    pass


class TooFewRecords(CohortError):
    pass


class TooFewSamples(CohortError):
    pass


class MissingCohort(CohortError):
    pass


class StratificationError(CohortError):
    """A stratification variable is missing for more than 10% of records."""
    pass


class SplitIntegrityError(CohortError):
    """Persisted split file failed its content-hash check."""
    pass
