"""Exception types raised by noisyem."""


class NoisyEMError(Exception):
    """Base class for all library errors."""


class InputError(NoisyEMError, ValueError):
    """Invalid argument: non-finite data, malformed parameters, bad ranges."""


class ConfigError(NoisyEMError, ValueError):
    """Malformed or inconsistent experiment configuration."""


class NumericalError(NoisyEMError, ArithmeticError):
    """An iteration could not continue numerically."""


class DegenerateComponentError(NumericalError):
    """A mixture component lost all of its responsibility mass."""

    def __init__(self, component, mass):
        self.component = component
        self.mass = mass
        super().__init__(
            f"component {component} has responsibility mass {mass:.3g}; "
            "cannot update its parameters"
        )


class DivergenceError(NumericalError):
    """An estimate ran off to infinity."""


class ScheduleExhaustedError(NumericalError):
    """A learning-rate schedule went negative."""
