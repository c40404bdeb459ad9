"""Exception taxonomy shared by all fernet modules."""


class FernetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FernetError, ValueError):
    """Tensor or layer geometry is invalid or inconsistent."""


class ConfigError(FernetError, ValueError):
    """Network configuration does not describe a buildable network."""


class LabelError(FernetError, ValueError):
    """A class label is outside the valid range."""


class DataError(FernetError, ValueError):
    """A dataset, manifest, or split request is invalid."""


class ParseError(DataError):
    """An input file could not be parsed; carries the offending row."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class FormatError(FernetError, ValueError):
    """A checkpoint file is malformed; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegeneracyError(FernetError, ValueError):
    """A geometric fit or warp is rank-deficient / non-invertible."""


class RangeError(FernetError, ValueError):
    """A numeric argument is outside its documented range."""


class DivergenceError(FernetError, RuntimeError):
    """Training produced a non-finite loss; carries the iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
