"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class StateError(RuntimeError):
    """An operation was called on experiment state it cannot act on."""


class ArchiveError(OSError):
    """Reading or writing an experiment archive failed; carries the path."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
