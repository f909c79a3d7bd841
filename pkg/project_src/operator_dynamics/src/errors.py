class OrqaError(Exception):
    """Base class for every failure raised by the simulator."""


class ContractViolation(OrqaError, ValueError):
    """A precondition or invariant of an operation was broken by the caller."""


class ConfigError(OrqaError):
    """Run configuration is invalid or references missing files."""


class DeliveryError(OrqaError):
    """An update batch could not be delivered to its destination worker."""


class _PositionedError(OrqaError):
    def __init__(self, message, layer=None, gate=None, term_count=None):
        self.layer = layer
        self.gate = gate
        self.term_count = term_count
        where = []
        if layer is not None:
            where.append(f"layer={layer}")
        if gate is not None:
            where.append(f"gate={gate}")
        if term_count is not None:
            where.append(f"|O|={term_count}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericalAbort(_PositionedError):
    """A NaN or infinite coefficient appeared during the evolution."""


class ResourceExhausted(_PositionedError):
    """The run ran out of memory."""
