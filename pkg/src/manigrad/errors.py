"""Exception types shared across the package."""


class ManigradError(Exception):
    """Base class for all library errors."""


class ShapeError(ManigradError, ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = ", ".join(str(list(s)) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SecondOrderError(ManigradError, RuntimeError):
    """A second derivative was requested through a piecewise-linear activation."""


class UntrainedModelError(ManigradError, RuntimeError):
    pass


class TrainingDivergedError(ManigradError, RuntimeError):
    pass


class SingularMetricError(ManigradError, ValueError):
    pass


class FormatError(ManigradError, ValueError):
    """A file does not follow its declared on-disk format."""


class FormatVersionError(FormatError):
    pass
