from __future__ import annotations


class NeusedError(Exception):
    """Base class for every error the engine raises on purpose."""

    exit_code: int = 1


class ConfigError(NeusedError, ValueError):
    exit_code = 2


class ShapeMismatchError(NeusedError, ValueError):
    exit_code = 2


class DegenerateTimestepError(NeusedError, ValueError):
    exit_code = 2


class DenoiserError(NeusedError):
    exit_code = 1


class DenoiserTransportError(DenoiserError):
    exit_code = 3


class MalformedResponseError(DenoiserError):
    exit_code = 1


class DenoiserShapeError(DenoiserError, ShapeMismatchError):
    exit_code = 1


class DatasetError(NeusedError):
    exit_code = 2


class MissingFilesError(DatasetError, FileNotFoundError):
    pass


class NonRigidPoseError(DatasetError, ValueError):
    pass


class CountMismatchError(DatasetError, ValueError):
    pass


class CheckpointMissingError(NeusedError, FileNotFoundError):
    exit_code = 4


class CheckpointError(NeusedError, ValueError):
    exit_code = 5


class DivergenceError(NeusedError, FloatingPointError):
    """Loss or gradient went non-finite during optimisation."""

    exit_code = 1
