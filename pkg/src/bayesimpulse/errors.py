"""Exception hierarchy shared by the solver modules."""


class ImpulseError(Exception):
    pass


class DegenerateMass(ImpulseError, ValueError):
    pass


class DegeneratePosterior(ImpulseError, ValueError):
    pass


class InvalidModelParams(ImpulseError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnsupportedAction(ImpulseError, ValueError):
    pass


class UnsupportedStateDomain(ImpulseError, ValueError):
    pass


class UnsupportedSimplexDimension(ImpulseError, ValueError):
    pass


class OutOfDomain(ImpulseError, ValueError):
    pass


class NonFiniteValue(ImpulseError, ArithmeticError):
    pass


class GridMismatch(ImpulseError, ValueError):
    pass


class InadmissibleEvent(ImpulseError, RuntimeError):
    pass


class StateEscape(ImpulseError, ValueError):
    pass
