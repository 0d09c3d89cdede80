"""Exception hierarchy shared by every module of the package."""


class SensorFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(SensorFusionError, ValueError):
    pass


class EmptyOutputError(DimensionError):
    pass


class NumericOverflowError(SensorFusionError, FloatingPointError):
    pass


class ParameterError(SensorFusionError, ValueError):
    pass


class LabelError(SensorFusionError, ValueError):
    pass


class StateError(SensorFusionError, RuntimeError):
    pass


class TopologyError(SensorFusionError, ValueError):
    pass


class ConfigurationError(SensorFusionError, ValueError):
    pass


class SamplingError(SensorFusionError, ValueError):
    pass


class SignalError(SensorFusionError, ValueError):
    """Raised by the preprocessing pipeline (resampling, filtering, normalizing)."""


class DataFormatError(SensorFusionError, ValueError):
    """A cohort file does not follow the CSV + manifest schema."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class IntegrityError(SensorFusionError, ValueError):
    pass


class MetricError(SensorFusionError, ValueError):
    pass


class DegenerateTestError(MetricError):
    """A t-test whose variance term is zero."""


class DivergenceError(SensorFusionError, FloatingPointError):
    pass
