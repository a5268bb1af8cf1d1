"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes, so raising the right class matters:
usage problems -> 1, validation/parse problems -> 2, backend problems -> 3,
enumeration-budget refusals -> 4.
"""


class CdtaxError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CdtaxError):
    """Bad invocation: missing input file, unknown flag value, and so on."""


class ParseError(CdtaxError):
    """An input file is malformed. The message names the offending location."""


class ValidationError(CdtaxError):
    """Structurally well-formed input that violates a documented invariant."""


class CoverageError(ValidationError):
    """The vocabulary cannot express bytes the grammar requires."""

    def __init__(self, message: str, missing_bytes: tuple[int, ...] = ()):
        super().__init__(message)
        self.missing_bytes = missing_bytes


class ConfigError(ValidationError):
    """An experiment config is inconsistent or incomplete."""


class ContractViolationError(CdtaxError):
    """A caller broke a documented precondition (e.g. advanced an invalid token)."""


class ZeroMassError(CdtaxError):
    """Every grammar-valid token carries zero model probability.

    This signals a model/grammar support mismatch: the masked distribution
    cannot be renormalized.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SupportViolationError(CdtaxError):
    """A KL numerator puts mass where the denominator has none."""


class BudgetExceededError(CdtaxError):
    """Exact enumeration would visit too many nodes; refusing rather than approximating."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


class BackendError(CdtaxError):
    """A model backend failed (network error, malformed response, ...)."""


class FingerprintMismatchError(BackendError):
    """A remote backend answered for a different vocabulary than expected."""


class InvalidOutputError(CdtaxError):
    """Output bytes do not parse as a schema-valid object.

    Scoring consumes this signal as a hard zero; it is not a crash.
    """


class MetricRangeError(ValidationError):
    """A scoring rule produced a value outside [0, 1]."""
