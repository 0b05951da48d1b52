"""Exception types shared across the package.

The CLI maps these onto process exit codes: invalid/degenerate input -> 2,
numerical failure -> 3, plugin backend failure -> 4.
"""


class GliosynthError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GliosynthError, ValueError):
    """Arguments violate a documented precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is structurally valid but degenerate (constant image, all-zero
    differences, region too small for a filter window, ...)."""


class NumericalError(GliosynthError, RuntimeError):
    """A numerical procedure failed beyond recovery (e.g. every bootstrap
    replicate diverged)."""


class PluginError(GliosynthError, RuntimeError):
    """Communication with an external denoiser/regressor subprocess failed."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (diffusion step l={step})"
        super().__init__(message)
        self.step = step
