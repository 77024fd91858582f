class ReidPatchError(Exception):
    pass


class ShapeError(ReidPatchError, ValueError):
    pass


class PlacementError(ReidPatchError, ValueError):
    pass


class DatasetPathError(ReidPatchError, FileNotFoundError):
    pass


class EmptyDatasetError(ReidPatchError):
    pass


class InsufficientIdentitiesError(ReidPatchError):
    pass


class DecodeError(ReidPatchError):
    pass


class RegistryError(ReidPatchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class WeightsLoadError(ReidPatchError):
    pass


class RoleViolationError(ReidPatchError):
    pass


class MissingTargetError(ReidPatchError, ValueError):
    pass


class EmptyQueryError(ReidPatchError, ValueError):
    pass


class EmptyTrialsError(ReidPatchError, ValueError):
    pass


class RankError(ReidPatchError, ValueError):
    pass


class DependencyError(ReidPatchError, RuntimeError):
    pass


class ConfigError(ReidPatchError):
    """Invalid run configuration; ``path`` is the dotted field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
