"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RmfnError(Exception):
    exit_code = 2


class DimensionError(RmfnError, ValueError):
    pass


class ContractError(RmfnError, ValueError):
    pass


class ConfigError(RmfnError, ValueError):
    pass


class ValidationError(RmfnError, ValueError):
    pass


class AlignmentError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, msg, record=None):
        if record is not None:
            msg = f"record {record}: {msg}"
        super().__init__(msg)
        self.record = record


class UndefinedMetricError(RmfnError, ValueError):
    pass


class NumericalError(RmfnError, ArithmeticError):
    exit_code = 3
