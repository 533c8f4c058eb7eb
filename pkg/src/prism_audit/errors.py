"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: data/validation problems exit with 2,
statistical degeneracies with 3.
"""


class PrismError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PrismError, ValueError):
    """A record violates a type invariant.

    ``line``, ``doc_id`` and ``field`` are filled in when known so that the
    ingest layer can print ``ERROR <line> <doc_id> <field> <message>``.
    """

    def __init__(self, message, *, line=None, doc_id=None, field=None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.doc_id = doc_id
        self.field = field

    def report_line(self) -> str:
        line = "-" if self.line is None else str(self.line)
        doc_id = "-" if self.doc_id is None else str(self.doc_id)
        field = "-" if self.field is None else str(self.field)
        return f"ERROR {line} {doc_id} {field} {self.message}"


class AlignmentError(PrismError, ValueError):
    """Two score sources share no (or not enough) document ids."""


class ConventionMismatch(PrismError, ValueError):
    """Score vectors with the wrong sign convention were combined."""


class MissingArtifact(PrismError, FileNotFoundError):
    """A run-directory artifact that a command depends on is absent."""


class ConfigError(PrismError, ValueError):
    """Unparseable or invalid run configuration."""


class DegenerateVariance(PrismError, ArithmeticError):
    """A rank correlation is undefined because one side is constant."""


class TooManyDegenerateResamples(DegenerateVariance):
    """A bootstrap position kept drawing constant resamples."""


class ZeroVarianceDifferences(DegenerateVariance):
    """Paired differences are all identical; the t statistic is undefined."""


class TrainingDiverged(PrismError, FloatingPointError):
    """Loss became non-finite during optimization."""
