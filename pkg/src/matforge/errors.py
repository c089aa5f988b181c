"""Exception hierarchy shared by every stage of the pipeline."""


class MatforgeError(Exception):
    """Base class for all errors raised by matforge."""


# mesh / texture I/O
class MissingUVs(MatforgeError):
    pass


class MalformedRecord(MatforgeError):
    def __init__(self, lineno, line, reason=""):
        self.lineno = lineno
        self.line = line
        msg = f"line {lineno}: cannot parse {line!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class EmptyMesh(MatforgeError):
    pass


class UnsupportedFormat(MatforgeError):
    pass


class ChannelMismatch(MatforgeError):
    pass


class ResolutionMismatch(MatforgeError):
    pass


class IoFailure(MatforgeError):
    pass


# rendering
class DegenerateMesh(MatforgeError):
    pass


class MissingChannel(MatforgeError):
    pass


# segmentation
class NoMasksFound(MatforgeError):
    pass


# library
class MissingManifest(MatforgeError):
    pass


class NoDiffuseSource(MatforgeError):
    pass


class UnknownMajorType(MatforgeError):
    pass


class UnknownSubcategory(MatforgeError):
    pass


class DuplicateId(MatforgeError):
    pass


class EmptyLibrary(MatforgeError):
    pass


# MLLM transport
class MLLMError(MatforgeError):
    pass


class AuthError(MLLMError):
    pass


class RateLimited(MLLMError):
    pass


class TransportError(MLLMError):
    pass


class MalformedResponse(MLLMError):
    pass


class NoValidChoice(MatforgeError):
    pass


class MatchFailure(MatforgeError):
    pass


# partition / estimation
class NoAssignedRegions(MatforgeError):
    pass


class MaterialMissing(MatforgeError):
    pass


class UnassignedTexels(MatforgeError):
    pass


# pipeline
class ConfigError(MatforgeError):
    pass


class MissingPriorArtifact(MatforgeError):
    pass


class StageError(MatforgeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
