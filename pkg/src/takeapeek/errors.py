"""Exception hierarchy; the CLI maps each family to an exit code."""


class TapError(Exception):
    exit_code = 1


class ConfigError(TapError, ValueError):
    exit_code = 2


class DataError(TapError):
    exit_code = 3


class NumericalError(TapError, ArithmeticError):
    exit_code = 4


class DimensionError(TapError, ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(TapError, ValueError):
    """A precondition other than shape was violated."""


class DomainError(NumericalError):
    """Input outside an op's mathematical domain, or a non-finite result."""


class MaskError(DataError, ValueError):
    pass


class MissingClassError(DataError, ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no labelled pixels in the support set")
        self.class_id = class_id


class LayoutError(DataError, ValueError):
    pass


class SamplingError(DataError, ValueError):
    pass


class EmptyContextError(ContractError):
    pass


class TrainingError(NumericalError):
    def __init__(self, step: int, message: str = "loss became NaN"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class OptimizationError(NumericalError):
    def __init__(self, param: str):
        super().__init__(f"non-finite gradient for parameter {param!r}")
        self.param = param
