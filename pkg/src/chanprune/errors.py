"""Exception hierarchy shared by every module."""


class ChanpruneError(Exception):
    """Base class for all toolkit errors."""


class InputFormatError(ChanpruneError):
    """Malformed external input (cfg text, weight files, annotations, blobs)."""


class CfgParseError(InputFormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CfgStructureError(InputFormatError):
    pass


class CfgReferenceError(InputFormatError):
    pass


class WeightsError(InputFormatError):
    pass


class WeightsUnderflowError(WeightsError):
    pass


class WeightsOverflowError(WeightsError):
    pass


class AlignmentError(ChanpruneError):
    """A weight store does not match the shapes implied by a network definition."""


class ShapeError(ChanpruneError):
    def __init__(self, message, layer=-1):
        self.layer = layer
        super().__init__(message)


class DecodeError(ChanpruneError):
    pass


class PruneError(ChanpruneError):
    """A mask or slicing invariant was violated while pruning."""


class TransformError(ChanpruneError):
    pass


class DivergenceError(ChanpruneError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class EvaluationError(ChanpruneError):
    pass


class AnnotationError(InputFormatError):
    """Malformed annotation or detection file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
