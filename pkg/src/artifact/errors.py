"""Exception hierarchy shared by every stage of the pipeline."""


class ArtifactError(Exception):
    """Base class for all package errors."""


# feature extraction
class UnknownBackbone(ArtifactError, KeyError):
    pass


class WeightLoadError(ArtifactError):
    pass


class BadPatchShape(ArtifactError, ValueError):
    pass


class UnknownLayerIndex(ArtifactError, KeyError):
    pass


# RDM analysis
class DimensionMismatch(ArtifactError, ValueError):
    pass


class TooFewPatches(ArtifactError, ValueError):
    pass


class ZeroVector(ArtifactError, ValueError):
    pass


class LabelMismatch(ArtifactError, ValueError):
    pass


class DegenerateTarget(ArtifactError, ValueError):
    pass


class NonConvergence(ArtifactError, RuntimeError):
    pass


class IncompleteGrid(ArtifactError, ValueError):
    pass


class KTooLarge(ArtifactError, ValueError):
    pass


# data preparation
class EncoderUnavailable(ArtifactError, RuntimeError):
    pass


class InvalidCRF(ArtifactError, ValueError):
    pass


class BadRange(ArtifactError, ValueError):
    pass


class FlowBackendUnavailable(ArtifactError, RuntimeError):
    pass


class NegativeGamma(ArtifactError, ValueError):
    pass


class MetricUnavailable(ArtifactError, RuntimeError):
    pass


class MissingDegradedVariant(ArtifactError, FileNotFoundError):
    pass


# models and training
class BackboneRequired(ArtifactError, ValueError):
    pass


class BadConfig(ArtifactError, ValueError):
    pass


class ShapeMismatch(ArtifactError, ValueError):
    pass


class EmptyDataset(ArtifactError, ValueError):
    pass


class MissingGeneratorCheckpoint(ArtifactError, FileNotFoundError):
    pass


class MissingPretrainState(ArtifactError, FileNotFoundError):
    pass


# evaluation
class SetTooSmall(ArtifactError, ValueError):
    pass


class MissingMetricBackend(ArtifactError, RuntimeError):
    pass


# pipeline orchestration
class MissingUpstreamArtifact(ArtifactError, FileNotFoundError):
    def __init__(self, artifact, command):
        self.artifact = artifact
        self.command = command
        super().__init__(f"missing upstream artifact {artifact}; run `{command}` first")
