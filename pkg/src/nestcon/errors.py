"""Exception hierarchy. Every error raised by the package derives from NestconError."""


class NestconError(Exception):
    """Base class for all package errors."""


class ShapeError(NestconError, ValueError):
    pass


class DegenerateVectorError(NestconError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(NestconError, ValueError):
    pass


class IngestError(NestconError):
    pass


class SplitError(NestconError):
    pass


class LowShotError(NestconError):
    pass


class EncodingError(NestconError, ValueError):
    pass


class TraceError(NestconError):
    pass


class DivergenceError(NestconError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(NestconError):
    pass


class EvalError(NestconError):
    pass


class ProbeError(NestconError):
    pass


class EmptyDatasetError(NestconError):
    pass


class DegenerateRowError(NestconError, ValueError):
    pass
