"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated (shapes, counts, states)."""


class DomainError(ValueError):
    """A parameter lies outside the domain of a special function."""


class InconsistencyError(ValueError):
    """Variational parameters fall below their priors."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class IncompatiblePriorsError(ContractError):
    """Batch summaries were fitted under different priors."""


class SchemaError(ContractError):
    """Batch summaries or messages disagree on data layout or schema version."""
