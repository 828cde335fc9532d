"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value outside its documented domain."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its preconditions."""


class DataError(IOError):
    """A dataset file is missing or corrupt; the message names the path."""


class DependencyError(RuntimeError):
    """A pipeline stage was started before its prerequisite stage."""
