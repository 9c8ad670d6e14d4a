from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cot_repe.enum import HookSignMode, OrientationRule, SteeringSign
from cot_repe.exceptions import CorruptFile, LayerMismatch
from cot_repe.formats import FORMAT_VERSION, POLICY_MAGIC, BinaryReader, BinaryWriter, read_file, write_file
from cot_repe.linalg import dot
from cot_repe.model import ActivationTrace, GenerationResult, InjectionHook, forward_with_taps
from cot_repe.reading import NORM_TOLERANCE, ReaderProvenance, ReadingVectorSet
from cot_repe.runner import ModelRunner

__all__ = [
    "SteeredGeneration",
    "SteeringDiagnostics",
    "SteeringPolicy",
    "effective_alphas",
    "load_policy",
    "policy_hook",
    "save_policy",
    "steered_generate",
]

# Version 2 adds the reader orientation rule and centering flag after the provenance
POLICY_VERSION = 2


class SteeringPolicy(BaseModel):
    """
    How to steer generation with a set of reading vectors.

    Attributes:
        readers (ReadingVectorSet): Reading vectors R_k.
        alpha (float): Steering magnitude.
        sign (SteeringSign): `proj` follows the sign of each layer's prompt projection; `pos` and `neg` fix it.
        layers (list[int] | None): Steered layers; defaults to every reader layer.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    readers: ReadingVectorSet = Field(default=..., description="Reading vectors R_k.")
    alpha: float = Field(default=..., description="Steering magnitude.")
    sign: SteeringSign = Field(default=SteeringSign.FOLLOW_PROJECTION, description="Sign rule.")
    layers: list[int] | None = Field(default=None, description="Steered layers; defaults to every reader layer.")

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("alpha must be finite")
        return value

    @model_validator(mode="after")
    def validate_layers(self) -> SteeringPolicy:
        if self.layers is None:
            self.layers = self.readers.layers
        if not self.layers:
            raise ValueError("A steering policy needs at least one layer")
        missing = sorted(set(self.layers) - set(self.readers.layers))
        if missing:
            raise ValueError(f"Layers {missing} have no reading vector")
        self.layers = sorted(self.layers)
        return self


class SteeringDiagnostics(BaseModel):
    """Per-layer prompt-time projections and the effective scales they produced."""

    alphas: dict[int, float]
    projections: dict[int, float]


class SteeredGeneration(BaseModel):
    """Output of `steered_generate`."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: list[int]
    text: str
    diagnostics: SteeringDiagnostics
    result: GenerationResult


def _projections(policy: SteeringPolicy, trace: ActivationTrace) -> dict[int, float]:
    return {k: dot(trace.last_prompt_token(k), policy.readers.direction(k)) for k in policy.layers}


def effective_alphas(policy: SteeringPolicy, prompt_trace: ActivationTrace) -> dict[int, float]:
    """
    Resolves the signed scale of every steered layer from the prompt's last token.

    With `proj`, alpha_k = |alpha| * sign(h_k(T) . R_k), where sign(0) = +1; with `pos` or `neg`
    every layer gets +|alpha| or -|alpha|.

    Raises:
        LayerMismatch: If the trace does not cover a steered layer.

    """
    magnitude = abs(policy.alpha)
    if policy.sign == SteeringSign.POSITIVE:
        return {k: magnitude for k in policy.layers}
    if policy.sign == SteeringSign.NEGATIVE:
        return {k: -magnitude for k in policy.layers}
    return {k: magnitude if projection >= 0 else -magnitude for k, projection in _projections(policy, prompt_trace).items()}


def policy_hook(policy: SteeringPolicy, alphas: dict[int, float]) -> InjectionHook:
    """Builds the injection hook for resolved per-layer scales, with signs frozen."""
    return InjectionHook(
        directions={k: policy.readers.direction(k) for k in policy.layers},
        scale=abs(policy.alpha),
        sign_mode=HookSignMode.FOLLOW_PROJECTION,
        signs={k: math.copysign(1.0, alpha) if alpha else 1.0 for k, alpha in alphas.items()},
    )


def steered_generate(runner: ModelRunner, prompt: str, policy: SteeringPolicy, max_new_tokens: int) -> SteeredGeneration:
    """
    Greedy generation with alpha_k * R_k added to every steered layer from the prompt's last token on.

    Signs are resolved once on an unsteered pass over the prompt and frozen for the whole
    generation, so repeated calls are deterministic.

    Args:
        runner (ModelRunner): The model and tokenizer.
        prompt (str): The prompt.
        policy (SteeringPolicy): The steering policy.
        max_new_tokens (int): Generation budget.

    Returns:
        SteeredGeneration: Tokens, decoded text and per-layer diagnostics.

    Raises:
        LayerMismatch: If a steered layer is outside the model.

    """
    depth = runner.model.depth
    outside = [k for k in policy.layers if not 1 <= k <= depth]
    if outside:
        raise LayerMismatch(f"Policy layers {outside} are outside a model of depth {depth}")
    if policy.readers.hidden_dim != runner.hidden_dim:
        raise LayerMismatch(f"Readers have width {policy.readers.hidden_dim}, the model {runner.hidden_dim}")

    _, trace = forward_with_taps(runner.model, runner.encode_prompt(prompt))
    alphas = effective_alphas(policy, trace)
    diagnostics = SteeringDiagnostics(alphas=alphas, projections=_projections(policy, trace))
    for k in policy.layers:
        logger.debug(f"[layer {k}] projection {diagnostics.projections[k]:+.4f}, alpha {alphas[k]:+g}")

    result = runner.generate(prompt, max_new_tokens, hook=policy_hook(policy, alphas))
    return SteeredGeneration(
        tokens=result.tokens,
        text=runner.tokenizer.decode(result.tokens),
        diagnostics=diagnostics,
        result=result,
    )


def save_policy(policy: SteeringPolicy, path: str | Path) -> None:
    """
    Writes a ROTS steering-policy file with the reading vectors inline.

    Layout: magic `ROTS`, version u32, alpha f64, sign rule (string), reader provenance (JSON
    string), reader orientation rule (string), centering flag u8, layer count u32, d u32; then per
    steered layer: index u32 and d `<f8` values.

    """
    readers = policy.readers
    writer = BinaryWriter(POLICY_MAGIC, version=POLICY_VERSION)
    writer.f64(policy.alpha)
    writer.string(policy.sign.value)
    writer.string(json.dumps(readers.provenance.model_dump(mode="json"), sort_keys=True))
    writer.string(readers.orientation.value)
    writer.u8(1 if readers.center else 0)
    writer.u32(len(policy.layers))
    writer.u32(readers.hidden_dim)
    for k in policy.layers:
        writer.u32(k)
        writer.array(readers.direction(k))

    write_file(path, writer.getvalue())
    logger.info(f"Saved steering policy (alpha={policy.alpha:g}, sign={policy.sign}) to '{path}'")


def load_policy(path: str | Path) -> SteeringPolicy:
    """
    Reads a ROTS file. Version 1 files carry no orientation rule and load as `mean_projection`.

    Raises:
        CorruptFile: On a bad header, truncation, or a stored direction that is not unit-norm.

    """
    reader = BinaryReader(read_file(path), POLICY_MAGIC, supported_versions=(FORMAT_VERSION, POLICY_VERSION))
    alpha = reader.f64()
    orientation, center = OrientationRule.MEAN_PROJECTION, False
    try:
        sign = SteeringSign(reader.string())
        provenance = ReaderProvenance.model_validate_json(reader.string())
        if reader.version >= POLICY_VERSION:
            orientation, center = OrientationRule(reader.string()), bool(reader.u8())
    except ValueError as exc:
        raise CorruptFile(f"Invalid steering-policy header in '{path}'") from exc

    layer_count, hidden_dim = reader.u32(), reader.u32()
    vectors = {}
    for _ in range(layer_count):
        layer = reader.u32()
        vector = reader.array(hidden_dim)
        if not abs(float(np.linalg.norm(vector)) - 1.0) <= NORM_TOLERANCE:
            raise CorruptFile(f"[layer {layer}] Stored steering direction is not unit-norm")
        vectors[layer] = vector
    reader.expect_end()

    if not vectors or not math.isfinite(alpha):
        raise CorruptFile(f"'{path}' holds no usable steering policy")

    readers = ReadingVectorSet(vectors=vectors, orientation=orientation, center=center, provenance=provenance)
    return SteeringPolicy(readers=readers, alpha=alpha, sign=sign)
