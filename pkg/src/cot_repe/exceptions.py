class CotRepeError(Exception):
    """
    Base class for every error raised by `cot_repe`.

    Attributes:
        exit_code (int): Process exit code used by the command-line interface when this error is not handled.

    """

    exit_code: int = 1
    default_message: str = "Unexpected error."

    def __init__(self, message: str | None = None):
        super().__init__(message or self.default_message)


# Configuration errors


class ConfigError(CotRepeError):
    exit_code = 2
    default_message = "Invalid configuration."


class InvalidConfig(ConfigError):
    default_message = "Configuration values are outside their documented ranges."


class UnknownTemplate(ConfigError):
    default_message = "Template not found in the template registry."


class UnknownCondition(ConfigError):
    default_message = "Benchmark condition could not be parsed."


# Data errors


class DataError(CotRepeError):
    exit_code = 3
    default_message = "Input data is unusable."


class NotEnoughSamples(DataError):
    default_message = "Task file holds fewer queries than requested."


class InsufficientStimuli(DataError):
    default_message = "Fewer stimuli were provided than stimuli per query."


class DegenerateInput(DataError):
    """
    Exception raised when a sample matrix has zero covariance, or fewer than two rows.

    Attributes:
        layer (int | None): Layer index the degenerate matrix belongs to, where applicable.

    """

    default_message = "Sample matrix has zero covariance."

    def __init__(self, message: str | None = None, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"[layer {layer}] {message or self.default_message}"
        super().__init__(message)


class DimensionMismatch(DataError):
    default_message = "Vectors or rows differ in length."


class ZeroVector(DataError):
    default_message = "Vector has zero norm."


class NonFiniteValues(DataError):
    default_message = "Vector or matrix holds NaN or infinite entries."


class SequenceTooShort(DataError):
    default_message = "Sequence must hold at least two tokens."


class EmptyPrompt(DataError):
    default_message = "Prompt does not tokenize to any token."


class EmptyResponse(DataError):
    default_message = "Response must hold at least one token."


class LengthMismatch(DataError):
    default_message = "Scores and tokens differ in length."


class EmptyInput(DataError):
    default_message = "At least one record is required."


class TooFewRuns(DataError):
    default_message = "At least two accuracies are required."


class TaskFileInvalid(DataError):
    default_message = "Task file could not be parsed."


class TokenOutOfRange(DataError):
    default_message = "Token id is outside the vocabulary."


class ContextOverflow(DataError):
    default_message = "Sequence is longer than the model's positional table."


class DumpMissingPrompt(DataError):
    default_message = "Activation dump has no record for the requested prompt."


# Missing artifacts


class MissingArtifact(CotRepeError):
    exit_code = 4
    default_message = "Required artifact is missing."


class IoFailure(MissingArtifact):
    default_message = "File could not be read or written."


class MissingPolicy(MissingArtifact):
    default_message = "Steered conditions require reading vectors and a steering policy."


# Model or layer mismatches


class ModelMismatch(CotRepeError):
    exit_code = 5
    default_message = "Artifact does not match the model."


class LayerOutOfRange(ModelMismatch):
    default_message = "Layer index is outside the model depth."


class LayerMismatch(ModelMismatch):
    default_message = "Layer set does not match the model or the trace."


class LayerSpecInvalid(ModelMismatch):
    default_message = "Layer specification could not be parsed."


class DumpMissingLayer(ModelMismatch):
    default_message = "Activation dump does not hold the requested layer."


# Corrupt files


class CorruptFile(CotRepeError):
    exit_code = 6
    default_message = "File is truncated or malformed."


class NormViolation(CorruptFile):
    default_message = "Stored direction is not unit-norm."
