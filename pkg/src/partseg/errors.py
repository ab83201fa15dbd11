"""Exception types shared across the package."""


class PartSegError(Exception):
    pass


class InvalidArgumentError(PartSegError, ValueError):
    pass


class InvalidDataError(PartSegError, ValueError):
    pass


class NotFoundError(PartSegError, KeyError):
    pass


class TemplateValidationError(PartSegError, ValueError):
    """Raised when a template document breaks a structural rule.

    ``node_id`` names the offending node (None when the problem is global).
    """

    def __init__(self, message, node_id=None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id
        self.reason = message


class IncompatibleAnnotationsError(PartSegError, ValueError):
    pass


class UndefinedScoreError(PartSegError, ValueError):
    pass


class CapacityError(PartSegError, ValueError):
    pass


class ConfigError(PartSegError, ValueError):
    pass


class FormatError(PartSegError, ValueError):
    """Malformed input file; carries the path and the line (or byte offset)."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset
