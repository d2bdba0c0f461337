"""Exception types shared across the package.

Each failure mode the pipeline must surface distinctly gets its own class so
callers (and the CLI exit-code mapping) can dispatch on type rather than on
message text.
"""


class McsegError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(McsegError):
    """A configuration value violates its invariant.

    ``field`` carries the dotted path of the offending entry.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ImageIOError(McsegError):
    """Base class for image file format failures."""


class UnsupportedMagicError(ImageIOError):
    """File does not start with a supported magic number (P5 or Pf)."""


class MalformedHeaderError(ImageIOError):
    """Header tokens are missing, non-numeric, or out of range."""


class TruncatedPayloadError(ImageIOError):
    """Pixel payload is shorter than the header promises."""


class ShapeError(McsegError):
    """Array arguments disagree in shape, or a layer rejects its input."""


class TrainingDivergedError(McsegError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, message: str = ""):
        self.epoch = epoch
        self.batch = batch
        detail = f" ({message})" if message else ""
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{detail}")


class DegeneratePoolError(McsegError):
    """A sample pool cannot support the requested statistic
    (all-identical values, empty pool, or too few points for k-NN)."""


class SelectionError(McsegError):
    """Ensemble selection produced no usable member set."""


class StageOrderError(McsegError):
    """A pipeline stage ran before its prerequisites, or against stale inputs."""


class EvaluationError(McsegError):
    """Evaluation hit a degenerate condition (e.g. empty incorrect pool)."""
