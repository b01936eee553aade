class A2MTError(Exception):
    """Base class for every error raised by the benchmark."""


class ConfigurationError(A2MTError, ValueError):
    pass


class InputError(A2MTError, ValueError):
    pass


class EpisodeCompleteError(A2MTError):
    pass


class IncompleteEpisodeError(A2MTError):
    pass


class PolicyStateError(A2MTError):
    pass


class TrainingError(A2MTError):
    pass


class DatasetFileError(A2MTError):
    pass
