"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """An argument violates the documented preconditions of an operation."""


class DegenerateSceneError(ValueError):
    """A scene cannot support the requested measurement (e.g. target out of view)."""


class ParseError(ValueError):
    """A persisted file is malformed.  ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
