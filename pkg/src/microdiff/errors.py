"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent option combination."""


class DataFormatError(ValueError):
    """Malformed input file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ElementInversionError(ArithmeticError):
    """det F <= 0 at a quadrature point; carries element and point indices."""

    def __init__(self, message, element=None, quad_point=None):
        super().__init__(message)
        self.element = element
        self.quad_point = quad_point


class NonConvergenceError(ArithmeticError):
    """Newton iteration failed after exhausting load bisection."""

    def __init__(self, message, residual_norm=None, step_index=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.step_index = step_index


class NumericalFailureError(ArithmeticError):
    """Non-finite value encountered mid-computation (training or sampling)."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    """Checkpoint missing, corrupt, or incompatible with the requested model."""


class ExhaustionError(RuntimeError):
    """Generation cap reached without a single accepted sample."""
