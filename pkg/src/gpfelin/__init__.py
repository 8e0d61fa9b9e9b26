"""Event-triggered online GP learning for feedback-linearizing tracking control."""

from .errors import ContractViolation, DivergenceFault, NumericalDegeneracy, PlantFault

__all__ = ["ContractViolation", "DivergenceFault", "NumericalDegeneracy", "PlantFault"]
__version__ = "0.1.0"
