"""Exception hierarchy. Every error the pipeline raises on purpose derives from CalprefError."""


class CalprefError(Exception):
    pass


class OutOfRange(CalprefError, ValueError):
    pass


class InvalidShift(CalprefError, ValueError):
    pass


class NonPositiveScore(CalprefError, ValueError):
    pass


class DegenerateSet(CalprefError, ValueError):
    def __init__(self, message: str, prompt_id: str | None = None):
        if prompt_id is not None:
            message = f"prompt {prompt_id!r}: {message}"
        super().__init__(message)
        self.prompt_id = prompt_id


class EmptyReference(CalprefError, ValueError):
    pass


class UnknownPrompt(CalprefError, KeyError):
    pass


class DimensionMismatch(CalprefError, ValueError):
    pass


class EmptyPool(CalprefError, ValueError):
    pass


class ShapeMismatch(CalprefError, ValueError):
    pass


class ArchMismatch(CalprefError, ValueError):
    pass


class MissingDeltaR(CalprefError, ValueError):
    pass


class NonConvergence(CalprefError, RuntimeError):
    pass


class DivergenceDetected(CalprefError, FloatingPointError):
    pass


class ZeroTaskVectors(CalprefError, ValueError):
    pass


class EmptyScores(CalprefError, ValueError):
    pass


class ConfigInvalid(CalprefError, ValueError):
    pass


class MissingArtifact(CalprefError, FileNotFoundError):
    pass


class SchemaVersionMismatch(CalprefError, ValueError):
    pass


class LineageMismatch(CalprefError, ValueError):
    pass
