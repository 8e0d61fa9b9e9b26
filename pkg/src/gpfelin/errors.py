"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Caller broke a documented precondition (shapes, ranges, missing inputs)."""


class NumericalDegeneracy(ArithmeticError):
    """A Gram matrix could not be factorized, or a variance came out negative."""


class PlantFault(RuntimeError):
    """The plant left its admissible domain (g(x) <= 0)."""


class DivergenceFault(RuntimeError):
    """The integrated state became non-finite."""
