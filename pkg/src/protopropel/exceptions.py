"""Exception types raised across the package."""


class ProtoPropelError(ValueError):
    """Base class for every error raised by this package."""


class MalformedLineError(ProtoPropelError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"malformed line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyFileError(ProtoPropelError):
    pass


class InvalidKError(ProtoPropelError):
    pass


class ShapeMismatchError(ProtoPropelError):
    pass


class AllIgnoredError(ProtoPropelError):
    """Every label in a training batch is IGNORE, so the loss is undefined."""


class UninitializedPrototypeError(ProtoPropelError):
    def __init__(self, class_id):
        self.class_id = class_id
        super().__init__(f"prototype for class {class_id} is not initialized")


class InvalidConfigError(ProtoPropelError):
    pass


class InvalidPlanError(ProtoPropelError):
    pass


class EmptySubsetError(ProtoPropelError):
    pass


class ClassAbsentError(ProtoPropelError):
    def __init__(self, class_id):
        self.class_id = class_id
        super().__init__(f"class {class_id} has no points in the cloud")


class ConfigKeyError(ProtoPropelError):
    """Base for config-file validation errors; ``key`` names the offender."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(message)


class UnknownKeyError(ConfigKeyError):
    def __init__(self, key):
        super().__init__(key, f"unknown config key {key!r}")


class OutOfRangeError(ConfigKeyError):
    def __init__(self, key, detail=""):
        super().__init__(key, f"config value out of range for {key!r}" + (f": {detail}" if detail else ""))


class MissingKeyError(ConfigKeyError):
    def __init__(self, key):
        super().__init__(key, f"missing required config key {key!r}")
