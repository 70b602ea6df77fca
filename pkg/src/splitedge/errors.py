"""Exception types shared across the package."""


class SplitEdgeError(Exception):
    pass


class ShapeError(SplitEdgeError, ValueError):
    pass


class CacheError(SplitEdgeError, RuntimeError):
    pass


class ConfigError(SplitEdgeError, ValueError):
    """Invalid run configuration. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path and line:
            where = f"{path}:{line}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)


class InfeasibleError(SplitEdgeError, RuntimeError):
    pass
