"""Exception hierarchy.

Numerical failures derive from :class:`ModelError`; input problems from
:class:`DataError` or :class:`ConfigError`. The CLI maps each family to its
own exit code.
"""


class ModelError(ValueError):
    """Base class for numerical/model failures."""


class InfectionPressureError(ModelError):
    def __init__(self, region, pressure):
        self.region = region
        self.pressure = pressure
        super().__init__(
            f"infection pressure {pressure:.6g} > 1 in region {region}; "
            "multinomial exposure probabilities are not valid"
        )


class DegenerateDistanceError(ModelError):
    pass


class InversionInfeasibleError(ModelError):
    pass


class DegenerateStateError(ModelError):
    pass


class InconsistentInputsError(ModelError):
    def __init__(self, name, value):
        self.name = name
        self.value = value
        super().__init__(f"{name}={value!r} lies outside [0, 1]")


class InitializationError(ModelError):
    pass


class CovarianceError(ModelError):
    pass


class SingularInnovationError(ModelError):
    pass


class FilterError(ModelError):
    """A filter step failed; carries the time index and region."""

    def __init__(self, message, t=None, region=None):
        self.t = t
        self.region = region
        where = []
        if t is not None:
            where.append(f"t={t}")
        if region is not None:
            where.append(f"region={region}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class AllInfeasibleError(ModelError):
    pass


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass
