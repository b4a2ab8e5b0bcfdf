"""Exception types raised across the package."""


class BevKitError(Exception):
    pass


class MalformedFile(BevKitError):
    pass


class ReflectanceOutOfRange(BevKitError):
    pass


class ParseError(BevKitError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingKey(BevKitError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing calibration key {name!r}")


class DegenerateBox(BevKitError):
    pass


class DomainError(BevKitError, ValueError):
    pass


class ShapeMismatch(BevKitError, ValueError):
    pass


class EmptyBatch(BevKitError, ValueError):
    pass


class EmptyInput(BevKitError, ValueError):
    pass


class NoSupportingPoints(BevKitError):
    pass


class NoGroundTruth(BevKitError):
    pass


class FrameSetMismatch(BevKitError):
    pass


class WeightMismatch(BevKitError):
    pass
