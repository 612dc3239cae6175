"""Exception hierarchy shared by every hgconv module."""


class HGConvError(Exception):
    """Base class for all errors raised by hgconv."""


class ShapeError(HGConvError, ValueError):
    pass


class InvalidLengthError(HGConvError, ValueError):
    pass


class NearSingularError(HGConvError, ValueError):
    """A spectrum has a bin too close to zero to be inverted."""

    def __init__(self, bin_index, magnitude, eps):
        self.bin_index = int(bin_index)
        self.magnitude = float(magnitude)
        self.eps = float(eps)
        super().__init__(
            f"spectral bin {self.bin_index} has magnitude {self.magnitude:.3e} < {self.eps:.1e}"
        )


class ConfigError(HGConvError, ValueError):
    """Invalid configuration. ``problems`` maps field names to diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = {"config": problems}
        self.problems = dict(problems)
        msg = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(msg)


class DataError(HGConvError, ValueError):
    pass


class StateError(HGConvError, RuntimeError):
    pass


class CheckpointError(HGConvError):
    code = 10


class CheckpointFormatError(CheckpointError):
    code = 11


class CheckpointVersionError(CheckpointError):
    code = 12


class CheckpointShapeError(CheckpointError):
    code = 13


class CheckpointTruncatedError(CheckpointError):
    code = 14
