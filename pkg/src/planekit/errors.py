"""Exception and warning types shared across the package.

Plain ``ValueError`` is used for domain errors (arguments outside their
documented range); everything pipeline-specific derives from
:class:`PlanekitError` and carries a CLI exit code.
"""


class PlanekitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(PlanekitError):
    """Inconsistent inputs: mismatched dimensions, bad parameters, missing files."""

    exit_code = 3


class DegenerateSampleError(PlanekitError):
    """Geometry that does not determine a plane (collinear points, rank-deficient fits)."""

    exit_code = 4


class GenerationError(PlanekitError):
    """Synthetic scene generation could not satisfy its constraints."""

    exit_code = 5


class FormatError(PlanekitError):
    """A file could not be parsed or violates its documented format."""

    exit_code = 6


class DecodeError(PlanekitError):
    """Exemplar decoding produced an invalid plane."""

    exit_code = 7


class PipelineWarning(UserWarning):
    """Non-fatal data issues: under-filled plane ranges, missing table entries."""
