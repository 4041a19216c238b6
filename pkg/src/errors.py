# src/errors.py
from typing import Optional


class DSIRPError(Exception):
    """Base class for every error raised by the framework"""


class RejectedInputError(DSIRPError, ValueError):
    """Input outside the documented domain of an operation"""


class ContractViolationError(DSIRPError):
    """A precondition on tours or schedules does not hold (e.g. capacity)"""

    def __init__(self, message: str, period: Optional[int] = None,
                 load: Optional[float] = None, capacity: Optional[float] = None):
        super().__init__(message)
        self.period = period
        self.load = load
        self.capacity = capacity


class PolicyInfeasibleError(ContractViolationError):
    """A policy returned a tour violating the vehicle capacity during a rollout"""


class CapabilityError(DSIRPError):
    """Problem size exceeds what an exact routine is allowed to handle"""


class SchemaError(DSIRPError, ValueError):
    """Malformed artifact file; `path` names the offending field"""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
