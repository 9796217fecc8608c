"""
Exception hierarchy shared by every module.

Library code raises these; the experiment runner catches them and turns
them into failed result dicts.
"""


class PyramidATError(Exception):
    """Base class for all errors raised by this project"""


class ConfigurationError(PyramidATError):
    """Invalid configuration, spec, shape or dataset parameters"""


class StructuralError(PyramidATError):
    """Tensor, pyramid or checkpoint shapes that do not fit together"""


class IngestionError(PyramidATError):
    """Missing or corrupt dataset files"""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class NonFiniteError(PyramidATError):
    """A gradient or loss became NaN/Inf"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
