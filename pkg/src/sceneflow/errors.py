"""Exception types raised across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class ShapeError(ContractError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class EmptySceneError(ContractError):
    pass


class NoCorrespondenceError(ContractError):
    pass


class DegenerateBatchError(ContractError):
    pass


class CheckpointError(ValueError):
    pass


class SceneFormatError(ValueError):
    """A scene directory is missing a file or contains a malformed line."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")
