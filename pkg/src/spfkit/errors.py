"""Exception hierarchy.

Input problems (bad files, bad specs, out-of-domain values) derive from
:class:`InputError`; numerical failures derive from :class:`ComputationError`.
The CLI maps the two families to exit codes 1 and 2.
"""


class SpfError(Exception):
    """Base class for all package errors."""


class InputError(SpfError, ValueError):
    pass


class SchemaError(InputError):
    """A required column is missing or the column map is malformed."""


class ParseError(InputError):
    """A cell could not be parsed as a number."""


class ValidationError(InputError):
    """Records violate a domain invariant.

    ``segment_ids`` lists every offending segment.
    """

    def __init__(self, message, segment_ids=()):
        super().__init__(message)
        self.segment_ids = list(segment_ids)


class DomainError(InputError):
    """A value lies outside the domain of a formula (log of zero, etc.)."""


class SpecError(InputError):
    """A model specification is inconsistent with the data or the module contract."""


class ArgumentError(InputError):
    pass


class ComputationError(SpfError, ArithmeticError):
    pass


class OptimizationError(ComputationError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
