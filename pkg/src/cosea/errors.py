"""Exception hierarchy shared by every cosea module."""


class CoseaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CoseaError, ValueError):
    pass


class ConfigurationError(CoseaError, ValueError):
    pass


class EmptySequenceError(CoseaError, ValueError):
    pass


class DegenerateVectorError(CoseaError, ValueError):
    pass


class PropagationError(CoseaError, ArithmeticError):
    """A non-finite value appeared while evaluating or differentiating an op."""


class ParseError(CoseaError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SkipRecord(CoseaError):
    """Signals that a record tokenized to nothing and should be skipped."""

    def __init__(self, record_id, side):
        super().__init__(f"record {record_id}: {side} side is empty after tokenization")
        self.record_id = record_id
        self.side = side


class FormatError(CoseaError, ValueError):
    pass


class CorruptionError(CoseaError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergenceError(CoseaError, ArithmeticError):
    def __init__(self, message, parameter=None, checkpoint=None):
        super().__init__(message)
        self.parameter = parameter
        self.checkpoint = checkpoint


class ProtocolError(CoseaError, ValueError):
    pass


class StalenessError(CoseaError, ValueError):
    pass
