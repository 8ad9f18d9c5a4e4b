"""Exception hierarchy.

Every error carries a short ``category`` so the command line can print a
single machine-parsable line on failure.
"""


class KDOCTError(Exception):
    category = "error"


class ShapeError(KDOCTError, ValueError):
    category = "shape"

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(KDOCTError, FloatingPointError):
    category = "nonfinite"


class GraphError(KDOCTError, RuntimeError):
    category = "graph"


class FormatError(KDOCTError, ValueError):
    category = "format"


class DataError(KDOCTError, ValueError):
    category = "data"


class ConfigError(KDOCTError, ValueError):
    category = "config"


class TrainingError(KDOCTError, RuntimeError):
    category = "training"
