"""Exception types raised across the package."""


class SegCNError(Exception):
    """Base class for all package errors."""


class InvalidParameter(SegCNError, ValueError):
    pass


class InvalidInput(SegCNError, ValueError):
    pass


class ShapeMismatch(SegCNError, ValueError):
    pass


class ConfigError(SegCNError, ValueError):
    pass


class NumericalError(SegCNError, ArithmeticError):
    """A loss or parameter became non-finite.

    ``component`` names the offending loss term, ``step`` the training step
    (``None`` outside the training loop).
    """

    def __init__(self, component, step=None, message=None):
        self.component = component
        self.step = step
        if message is None:
            message = f"non-finite value in {component!r}"
            if step is not None:
                message += f" at step {step}"
        super().__init__(message)


class NoTissue(SegCNError, ValueError):
    pass


class DegenerateStains(SegCNError, ValueError):
    pass
