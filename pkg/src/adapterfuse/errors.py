"""Exception hierarchy shared by every adapterfuse module."""


class AdapterFuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdapterFuseError):
    """Operands have incompatible dimensions; the message names both shapes."""


class FusionShapeError(ShapeError):
    """Shape mismatch between hidden states and expert query tokens."""


class NonFiniteError(AdapterFuseError):
    """A public operation produced (or was fed) NaN or Inf entries."""


class CapacityError(AdapterFuseError):
    """A token sequence exceeds the model's configured maximum length."""


class VocabularyError(AdapterFuseError):
    """A token id falls outside the model vocabulary."""


class FeatureFormatError(AdapterFuseError):
    """A camera feature set is malformed (missing camera, bad shape, non-finite)."""


class DatasetError(AdapterFuseError):
    """A dataset file is malformed or references a missing feature file."""


class EvaluationError(AdapterFuseError):
    """A metric or gradient check was asked to evaluate an empty or invalid input."""


class ScoreRangeError(AdapterFuseError):
    """A metric component is outside its documented range."""


class JudgeError(AdapterFuseError):
    """The remote judge failed; the message carries the pair index."""


class JudgeParseError(JudgeError):
    """The judge replied with something that is not a 0-100 rating."""


class DivergenceError(AdapterFuseError):
    """Training produced a non-finite gradient; the message names the parameter."""


class CheckpointError(AdapterFuseError):
    """A checkpoint file is missing the magic header or has inconsistent contents."""
