"""Exception hierarchy.

Two families matter to callers: ``InputError`` (bad data, config, or
arguments; the CLI exits 1) and ``EstimationError`` (the numerics failed at
runtime; the CLI exits 2).
"""


class DrSelectError(Exception):
    """Base class for all package errors."""


class InputError(DrSelectError):
    pass


class SchemaError(InputError):
    pass


class ParseError(InputError):
    pass


class DataValidationError(InputError):
    pass


class ConfigError(InputError):
    pass


class SizingError(InputError):
    pass


class ContractError(InputError):
    pass


class EstimationError(DrSelectError):
    pass


class FitError(EstimationError):
    pass


class EvaluationError(EstimationError):
    pass


class RootFindingError(EstimationError):
    pass


class InferenceError(EstimationError):
    pass


class ExperimentError(EstimationError):
    pass
