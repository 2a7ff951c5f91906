"""Exception types shared across the package."""


class Ufo2Error(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(Ufo2Error):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(Ufo2Error):
    """Invalid configuration value or unknown configuration key."""


class MaskError(Ufo2Error):
    """A mask leaves no admissible position (e.g. a fully masked softmax row)."""


class GraphError(Ufo2Error):
    """Misuse of the autodiff graph (non-scalar root, double backward)."""


class DataError(Ufo2Error):
    """Malformed input data: manifests, audio files, feature files, lengths."""


class DegenerateError(Ufo2Error):
    """Numerically degenerate input (e.g. zero-norm vector in a cosine)."""


class InfeasibleAlignmentError(Ufo2Error):
    """Label sequence admits no CTC alignment for the given frame count."""


class DivergenceError(Ufo2Error):
    """Training diverged: a non-finite gradient or parameter was produced."""


class CheckpointError(Ufo2Error):
    """Checkpoint file is corrupt, incompatible, or missing required parts."""


class MetricError(Ufo2Error):
    """An evaluation metric is undefined for the given inputs."""
