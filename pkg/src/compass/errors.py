"""Exception hierarchy shared by every stage of the compiler."""


class CompassError(Exception):
    """Base class for all compiler errors."""


class ParseError(CompassError):
    pass


class ValidationError(CompassError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class UnknownChip(CompassError):
    pass


class UnknownModel(CompassError):
    pass


class CycleError(CompassError):
    pass


class ShapeError(CompassError):
    pass


class NotMappable(CompassError):
    pass


class UnmappableLayer(CompassError):
    """A layer cannot be placed on the chip at all (model/chip pair infeasible)."""


class PackingFailure(CompassError):
    pass


class DegenerateExpectation(CompassError):
    pass


class GlobalMemoryOverflow(CompassError):
    def __init__(self, partition, needed, available):
        self.partition = partition
        super().__init__(
            f"partition {partition}: live intermediates need {needed} B, "
            f"global memory holds {available} B"
        )
