"""Exception types shared across the package."""


class MaropfError(Exception):
    """Base class for all package errors."""


class CaseError(MaropfError):
    """Case file violates the schema; message names the offending field."""


class TopologyError(MaropfError):
    """Feeder graph is not a tree rooted at the slack bus."""

    def __init__(self, message, cycle=None, orphans=None):
        super().__init__(message)
        self.cycle = list(cycle) if cycle else []
        self.orphans = list(orphans) if orphans else []


class ParameterError(MaropfError):
    """Device or limit parameters are out of their admissible range."""


class BuildError(MaropfError):
    """Program builder was asked for a variable or input it does not have."""


class SolverError(MaropfError):
    """Conic solve did not return an optimal point."""

    def __init__(self, message, status=None, dump_path=None):
        super().__init__(message)
        self.status = status
        self.dump_path = dump_path


class PowerFlowDivergence(MaropfError):
    """Backward/forward sweep failed to converge (likely voltage collapse)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EnumerationLimitError(MaropfError):
    """Mode-pattern count exceeds the caller-supplied enumeration limit."""

    def __init__(self, message, count):
        super().__init__(message)
        self.count = count


class StageError(MaropfError):
    """A scenario stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
