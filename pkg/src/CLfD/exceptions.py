class CLfDError(Exception):
    """Base class for every error raised by the package."""

    category = "error"


class ShapeError(CLfDError, ValueError):
    category = "shape"


class ConfigError(CLfDError, ValueError):
    category = "config"


class DatasetError(CLfDError, ValueError):
    category = "dataset"


class CheckpointError(CLfDError, ValueError):
    category = "checkpoint"


class GraphError(CLfDError, RuntimeError):
    category = "graph"


class NonFiniteError(CLfDError, ValueError):
    category = "nonfinite"


class DivergenceError(CLfDError, RuntimeError):
    category = "divergence"


class EpisodeError(CLfDError, RuntimeError):
    category = "episode"
