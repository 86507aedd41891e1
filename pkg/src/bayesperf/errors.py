"""Exception hierarchy shared by all bayesperf modules."""


class BayesPerfError(Exception):
    """Base class for every error raised by this package."""


class InputError(BayesPerfError):
    """Malformed or inconsistent user input (CLI exit code 2)."""


class NumericalError(BayesPerfError):
    """Numerical failure during a computation (CLI exit code 3)."""


class UnknownEvent(InputError):
    def __init__(self, name):
        super().__init__(f"unknown event {name!r}")
        self.name = name


class DuplicateFactorId(InputError):
    def __init__(self, factor_id):
        super().__init__(f"duplicate factor id {factor_id!r}")
        self.factor_id = factor_id


class InvalidConfiguration(InputError):
    pass


class InvalidRequestedSchedule(InputError):
    def __init__(self, slice_index, report):
        super().__init__(f"requested slice {slice_index} is invalid: {report.describe()}")
        self.slice_index = slice_index
        self.report = report


class InvalidSchedule(InputError):
    pass


class NoPath(BayesPerfError):
    pass


class ExpressionSyntaxError(InputError):
    pass


class DivisionByZero(NumericalError):
    pass


class DegenerateTiming(InputError):
    pass


class InsufficientSamples(InputError):
    pass


class CavityDegenerate(NumericalError):
    pass


class ImproperGlobal(NumericalError):
    pass


class NoObservations(InputError):
    pass


class EmptySeries(InputError):
    pass


class ZeroReference(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class RelationInconsistent(InputError):
    pass
