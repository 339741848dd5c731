"""
Error Types
Exception hierarchy shared by the tensor engine, the networks, the trainer and the CLI.
"""

from typing import Optional


class DmlBnnError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(DmlBnnError, ValueError):
    """Tensor dimensions are incompatible with the requested operation"""


class DomainError(DmlBnnError, ValueError):
    """An input lies outside the domain of a primitive (log of 0, division by 0)"""


class GraphError(DmlBnnError, RuntimeError):
    """The autodiff graph was used incorrectly"""


class NonFiniteError(DmlBnnError, FloatingPointError):
    """NaN or Inf reached a loss, a gradient or a checked tensor"""


class LabelError(DmlBnnError, ValueError):
    """A class label is outside [0, num_classes)"""


class ConfigError(DmlBnnError, ValueError):
    """Configuration failed to parse or validate"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DatasetError(DmlBnnError, ValueError):
    """A dataset file is missing or malformed"""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {message}")


class CheckpointError(DmlBnnError, ValueError):
    """A checkpoint is malformed or does not match the target architecture"""
