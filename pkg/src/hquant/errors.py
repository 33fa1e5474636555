"""Exception hierarchy for the toolkit.

Three broad families map onto CLI exit codes: ConfigError (2), DataError (3,
covers file/format/token problems) and NumericalError (4, anything that
signals the math went off the rails). Everything derives from HquantError so
callers can catch toolkit failures in one clause.
"""


class HquantError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HquantError):
    """Invalid or inconsistent run configuration."""


# --- shape / input validation -------------------------------------------------

class DimensionMismatch(HquantError):
    """Operand shapes are incompatible."""


class RowCountMismatch(DimensionMismatch):
    """Paired activation matrices disagree on row count."""


class TooFewRows(HquantError):
    """Operation needs at least two sample rows."""


# --- numerical failures (exit code 4) ----------------------------------------

class NumericalError(HquantError):
    """A numerical routine failed beyond recovery."""


class NotPositiveDefinite(NumericalError):
    """Cholesky factorization failed even after damping retries."""


class HessianNotPD(NotPositiveDefinite):
    """Calibration Hessian is not positive definite after damping."""


class NonFiniteActivation(NumericalError):
    """Forward pass produced NaN/Inf; pipeline must abort."""


class DegenerateActivations(NumericalError):
    """Calibration activations carry no usable signal (all ~zero)."""


class DegenerateWeights(NumericalError):
    """Weight matrix carries no usable signal (all zero)."""


# --- data / file errors (exit code 3) -----------------------------------------

class DataError(HquantError):
    """File or token-stream problem."""


class TokenOutOfRange(DataError):
    """Token id >= vocabulary size."""


class SequenceTooLong(DataError):
    """Sequence exceeds the model's max_seq."""


class FileTooShort(DataError):
    """Source file has too few tokens for the requested windows."""


class FormatError(DataError):
    """Container file violates the HQTM / HQTM-Q format."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class HeaderMismatch(FormatError):
    """Header is inconsistent with expectations or with the payload."""


class TruncatedFile(FormatError):
    """File ends before the declared payload / trailer."""


class ChecksumMismatch(FormatError):
    """Payload CRC32 does not match the stored trailer."""


# --- search / selection -------------------------------------------------------

class EmptyPool(ConfigError):
    """Candidate pool must contain at least one method."""


class SearchSpaceTooLarge(ConfigError):
    """Exhaustive enumeration guard tripped (|pool|^L too big)."""


class InfeasibleBudget(ConfigError):
    """Bit budget cannot be met with the given bit options."""
