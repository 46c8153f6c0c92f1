"""Exception types shared across the package."""


class ConeTankError(Exception):
    """Base class for all package errors."""


class DomainError(ConeTankError, ValueError):
    """A level, flow or parameter lies outside the model's valid domain."""


class ConfigError(ConeTankError, ValueError):
    """Run configuration failed schema or invariant validation."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class SimulationAborted(ConeTankError):
    """The plant left the physical tank; carries the partial trace."""

    def __init__(self, reason: str, trace=None):
        self.reason = reason
        self.trace = trace
        super().__init__(reason)
