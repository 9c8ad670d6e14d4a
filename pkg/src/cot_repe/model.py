from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from cot_repe.enum import FinalNorm, HookSignMode
from cot_repe.exceptions import ContextOverflow, InvalidConfig, LayerMismatch, SequenceTooShort, TokenOutOfRange
from cot_repe.formats import CHECKPOINT_MAGIC, BinaryReader, BinaryWriter, read_file, write_file
from cot_repe.linalg import dot, unit

__all__ = [
    "ActivationTrace",
    "GenerationResult",
    "InjectionHook",
    "ModelConfig",
    "PlantedDirection",
    "ToyTransformer",
    "build",
    "build_planted",
    "forward_with_taps",
    "generate",
    "generate_with_trace",
    "load_checkpoint",
    "perplexity",
    "save_checkpoint",
    "sequence_perplexity",
]

LAYER_NORM_EPS = 1e-5
UNIT_NORM_TOLERANCE = 1e-6


class ModelConfig(BaseModel):
    """
    Shape of a toy decoder-only transformer.

    Attributes:
        layer_count (int): Number of decoder blocks, L.
        hidden_dim (int): Width of the residual stream, d.
        head_count (int): Number of attention heads; must divide `hidden_dim`.
        vocab_size (int): Number of token ids, V.
        final_norm (FinalNorm): Normalization applied before the unembedding.
        max_positions (int): Size of the learned positional table.
        mlp_ratio (int): Hidden width of each MLP, as a multiple of `hidden_dim`.

    """

    layer_count: int = Field(default=6, description="Number of decoder blocks, L.")
    hidden_dim: int = Field(default=64, description="Width of the residual stream, d.")
    head_count: int = Field(default=4, description="Number of attention heads; must divide `hidden_dim`.")
    vocab_size: int = Field(default=1502, description="Number of token ids, V.")
    final_norm: FinalNorm = Field(
        default=FinalNorm.STANDARD,
        description="Normalization applied before the unembedding.",
    )
    max_positions: int = Field(default=2048, description="Size of the learned positional table.")
    mlp_ratio: int = Field(default=4, description="Hidden width of each MLP, as a multiple of `hidden_dim`.")

    def check(self) -> None:
        """
        Validates the configuration.

        Raises:
            InvalidConfig: If any dimension is out of range.

        """
        if self.layer_count < 1:
            raise InvalidConfig(f"layer_count must be at least 1, got {self.layer_count}")
        if self.hidden_dim < 2:
            raise InvalidConfig(f"hidden_dim must be at least 2, got {self.hidden_dim}")
        if self.head_count < 1 or self.hidden_dim % self.head_count:
            raise InvalidConfig(f"hidden_dim {self.hidden_dim} is not divisible by head_count {self.head_count}")
        if self.vocab_size < 4:
            raise InvalidConfig(f"vocab_size must be at least 4, got {self.vocab_size}")
        if self.max_positions < 1 or self.mlp_ratio < 1:
            raise InvalidConfig("max_positions and mlp_ratio must be positive")


class BlockWeights(BaseModel):
    """Parameters of one pre-norm decoder block (self-attention followed by an MLP)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def field_order(cls) -> list[str]:
        return list(cls.model_fields)


class PlantedDirection(BaseModel):
    """
    A direction whose injection at the last layer moves one logit by a known slope.

    Attributes:
        layer (int): Layer index the direction is planted at (always the last layer).
        direction (np.ndarray): Unit direction u.
        target_token (int): Token id t whose logit responds to u.
        slope (float): Change of logit(t) per unit of injected scale, i.e. unembed_row(t) . u.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    layer: int = Field(default=..., description="Layer index the direction is planted at (always the last layer).")
    direction: np.ndarray = Field(default=..., description="Unit direction u.")
    target_token: int = Field(default=..., description="Token id t whose logit responds to u.")
    slope: float = Field(default=0.0, description="Change of logit(t) per unit of injected scale.")


class ToyTransformer(BaseModel):
    """
    Deterministic toy decoder-only transformer with learned positional embeddings.

    A built model is never mutated by forward passes, so a single instance can be shared across
    concurrent readers.

    Attributes:
        config (ModelConfig): Shape of the model.
        seed (int): Seed the weights were drawn from.
        token_embedding (np.ndarray): (V, d) token embedding table.
        position_embedding (np.ndarray): (max_positions, d) positional table.
        blocks (list[BlockWeights]): Decoder blocks, first to last.
        final_gain (np.ndarray): Gain of the final layer norm.
        final_bias (np.ndarray): Bias of the final layer norm.
        unembedding (np.ndarray): (V, d) unembedding matrix; logits are h @ unembedding.T.
        planted (PlantedDirection | None): Planted steering direction, if built by `build_planted`.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    seed: int
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    blocks: list[BlockWeights]
    final_gain: np.ndarray
    final_bias: np.ndarray
    unembedding: np.ndarray
    planted: PlantedDirection | None = None

    @property
    def model_id(self) -> str:
        c = self.config
        suffix = "-planted" if self.planted else ""
        return f"toy-L{c.layer_count}-d{c.hidden_dim}-h{c.head_count}-V{c.vocab_size}-seed{self.seed}{suffix}"

    @property
    def depth(self) -> int:
        return self.config.layer_count


class InjectionHook(BaseModel):
    """
    Adds scaled directions to the residual stream of selected layers.

    At every position from `start_position` onward, the output of block k (for k in the layer
    set) becomes h + alpha_k * R_k, and that value is both stored in the trace and used downstream.

    Attributes:
        directions (dict[int, np.ndarray]): Unit direction per layer index (1-based).
        scale (float): Signed scale alpha.
        sign_mode (HookSignMode): `fixed` uses `scale` as-is; `follow_projection` uses |scale| times the sign of
            the layer's activation at `start_position` projected onto its direction.
        start_position (int | None): First position to inject at; defaults to the last prompt token.
        signs (dict[int, float] | None): Frozen per-layer signs for `follow_projection`; resolved in-pass if omitted.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    directions: dict[int, np.ndarray] = Field(default_factory=dict, description="Unit direction per layer index.")
    scale: float = Field(default=0.0, description="Signed scale alpha.")
    sign_mode: HookSignMode = Field(default=HookSignMode.FIXED, description="How the sign of the scale is resolved.")
    start_position: int | None = Field(default=None, description="First position to inject at.")
    signs: dict[int, float] | None = Field(default=None, description="Frozen per-layer signs.")

    @field_validator("directions")
    @classmethod
    def validate_directions(cls, value: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        checked = {}
        for layer, direction in value.items():
            direction = np.asarray(direction, dtype=np.float64)
            norm = float(np.linalg.norm(direction))
            if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
                raise ValueError(f"Direction for layer {layer} has norm {norm}, expected 1")
            checked[int(layer)] = direction
        return checked

    @property
    def layers(self) -> list[int]:
        return sorted(self.directions)

    def alpha_for(self, layer: int, activation: np.ndarray) -> float:
        """
        Resolves the effective scale of one layer.

        Args:
            layer (int): The layer index.
            activation (np.ndarray): Pre-injection activation at `start_position`, used only when the sign is not frozen.

        Returns:
            float: The signed effective scale.

        """
        if self.sign_mode == HookSignMode.FIXED:
            return self.scale
        if self.signs is not None and layer in self.signs:
            return abs(self.scale) * self.signs[layer]
        projection = dot(activation, self.directions[layer])
        return abs(self.scale) * (1.0 if projection >= 0 else -1.0)


class ActivationTrace(BaseModel):
    """
    Post-block residual-stream activations for every layer and position of a forward pass.

    Attributes:
        activations (np.ndarray): (L, positions, d) array; `layer(k)` maps 1-based k to index k - 1.
        prompt_length (int): Number of tokens in the prompt that started the pass.
        pre_injection (dict[int, np.ndarray]): For hooked layers, the (positions, d) activations before injection.
        alphas (dict[int, float]): Effective scale applied per hooked layer.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    activations: np.ndarray
    prompt_length: int
    pre_injection: dict[int, np.ndarray] = Field(default_factory=dict)
    alphas: dict[int, float] = Field(default_factory=dict)

    @property
    def layer_count(self) -> int:
        return self.activations.shape[0]

    @property
    def positions(self) -> int:
        return self.activations.shape[1]

    def layer(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.layer_count:
            raise LayerMismatch(f"Layer {k} is outside a trace of {self.layer_count} layers")
        return self.activations[k - 1]

    def at(self, k: int, position: int) -> np.ndarray:
        return self.layer(k)[position]

    def last_prompt_token(self, k: int) -> np.ndarray:
        return self.at(k, self.prompt_length - 1)


class GenerationResult(BaseModel):
    """Tokens produced by greedy decoding, with the logits of each step and the full trace."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tokens: list[int]
    step_logits: np.ndarray
    trace: ActivationTrace


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LAYER_NORM_EPS) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _DecodeState:
    """
    Incremental forward pass with a per-layer key/value cache.

    Feeding a sequence in one call or token by token yields the same activations: attention is
    causal and every position only reads cached keys and values of earlier positions.

    """

    def __init__(self, model: ToyTransformer, hook: InjectionHook | None = None) -> None:
        self.model = model
        self.hook = hook
        self.position = 0
        self.prompt_length: int | None = None

        config = model.config
        self._head_dim = config.hidden_dim // config.head_count
        self._keys: list[np.ndarray] = [np.zeros((0, config.hidden_dim)) for _ in range(config.layer_count)]
        self._values: list[np.ndarray] = [np.zeros((0, config.hidden_dim)) for _ in range(config.layer_count)]
        self._trace: list[list[np.ndarray]] = [[] for _ in range(config.layer_count)]
        self._pre_injection: dict[int, list[np.ndarray]] = {}
        self.alphas: dict[int, float] = {}

        if hook is not None:
            bad = [k for k in hook.layers if not 1 <= k <= config.layer_count]
            if bad:
                raise LayerMismatch(f"Hook layers {bad} are outside a model of depth {config.layer_count}")
            self._pre_injection = {k: [] for k in hook.layers}

    @property
    def start_position(self) -> int:
        if self.hook is not None and self.hook.start_position is not None:
            return self.hook.start_position
        return (self.prompt_length or 1) - 1

    def _attention(self, idx: int, block: BlockWeights, x: np.ndarray, first: int) -> np.ndarray:
        config = self.model.config
        heads, head_dim = config.head_count, self._head_dim

        a = _layer_norm(x, block.ln1_gain, block.ln1_bias)
        q, k, v = a @ block.w_q, a @ block.w_k, a @ block.w_v

        self._keys[idx] = np.concatenate([self._keys[idx], k])
        self._values[idx] = np.concatenate([self._values[idx], v])
        keys, values = self._keys[idx], self._values[idx]

        new, total = x.shape[0], keys.shape[0]
        q = q.reshape(new, heads, head_dim).transpose(1, 0, 2)
        keys = keys.reshape(total, heads, head_dim).transpose(1, 0, 2)
        values = values.reshape(total, heads, head_dim).transpose(1, 0, 2)

        scores = q @ keys.transpose(0, 2, 1) / math.sqrt(head_dim)
        query_positions = np.arange(first, first + new)[:, None]
        key_positions = np.arange(total)[None, :]
        scores = np.where(key_positions > query_positions, -np.inf, scores)

        out = _softmax(scores) @ values
        out = out.transpose(1, 0, 2).reshape(new, config.hidden_dim)
        return out @ block.w_o

    def _inject(self, layer: int, h: np.ndarray, first: int) -> np.ndarray:
        direction = self.hook.directions[layer]
        pre = h.copy()
        self._pre_injection[layer].append(pre)

        start = self.start_position
        rows = np.arange(first, first + h.shape[0]) >= start
        if not rows.any():
            return h

        if layer not in self.alphas:
            if start < first:
                raise LayerMismatch(f"Injection start {start} precedes the first decoded position {first}")
            self.alphas[layer] = self.hook.alpha_for(layer, pre[start - first])

        h = h.copy()
        h[rows] += self.alphas[layer] * direction
        return h

    def extend(self, token_ids: list[int]) -> np.ndarray:
        """
        Runs the model over new tokens and returns their logits.

        Args:
            token_ids (list[int]): Tokens appended after every token fed so far.

        Returns:
            np.ndarray: (len(token_ids), V) logits.

        """
        model, config = self.model, self.model.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise SequenceTooShort("Cannot run a forward pass over zero tokens.")
        if ids.min() < 0 or ids.max() >= config.vocab_size:
            raise TokenOutOfRange(f"Token ids must lie in [0, {config.vocab_size}), got {ids.min()}..{ids.max()}")

        first = self.position
        if first + ids.size > config.max_positions:
            raise ContextOverflow(f"{first + ids.size} positions exceed the table of {config.max_positions}")
        if self.prompt_length is None:
            self.prompt_length = int(ids.size)

        h = model.token_embedding[ids] + model.position_embedding[first : first + ids.size]
        for idx, block in enumerate(model.blocks):
            h = h + self._attention(idx, block, h, first)
            m = _layer_norm(h, block.ln2_gain, block.ln2_bias)
            h = h + _gelu(m @ block.w_in + block.b_in) @ block.w_out + block.b_out

            layer = idx + 1
            if self.hook is not None and layer in self.hook.directions:
                h = self._inject(layer, h, first)
            self._trace[idx].append(h)

        self.position += int(ids.size)

        if config.final_norm == FinalNorm.STANDARD:
            h = _layer_norm(h, model.final_gain, model.final_bias)
        return h @ model.unembedding.T

    def trace(self) -> ActivationTrace:
        return ActivationTrace(
            activations=np.stack([np.concatenate(rows) for rows in self._trace]),
            prompt_length=self.prompt_length or 0,
            pre_injection={k: np.concatenate(rows) for k, rows in self._pre_injection.items() if rows},
            alphas=dict(self.alphas),
        )


def build(seed: int, config: ModelConfig | None = None) -> ToyTransformer:
    """
    Builds a toy transformer with weights drawn from a seeded generator.

    Args:
        seed (int): Seed of the weight generator; the same seed and config yield identical weights.
        config (ModelConfig | None): Model shape; defaults to `ModelConfig()`.

    Returns:
        ToyTransformer: The built model.

    Raises:
        InvalidConfig: If the configuration is out of range.

    """
    config = config or ModelConfig()
    config.check()

    rng = np.random.default_rng(seed)
    d, v, hidden = config.hidden_dim, config.vocab_size, config.hidden_dim * config.mlp_ratio

    def normal(*shape: int, std: float) -> np.ndarray:
        return rng.normal(0.0, std, size=shape)

    token_embedding = normal(v, d, std=1.0)
    position_embedding = normal(config.max_positions, d, std=0.1)

    blocks = []
    for _ in range(config.layer_count):
        blocks.append(
            BlockWeights(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                w_q=normal(d, d, std=d**-0.5),
                w_k=normal(d, d, std=d**-0.5),
                w_v=normal(d, d, std=d**-0.5),
                w_o=normal(d, d, std=d**-0.5),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                w_in=normal(d, hidden, std=d**-0.5),
                b_in=np.zeros(hidden),
                w_out=normal(hidden, d, std=hidden**-0.5),
                b_out=np.zeros(d),
            )
        )

    model = ToyTransformer(
        config=config,
        seed=seed,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        blocks=blocks,
        final_gain=np.ones(d),
        final_bias=np.zeros(d),
        unembedding=normal(v, d, std=d**-0.5),
    )
    logger.debug(f"Built {model.model_id}")
    return model


def build_planted(
    seed: int,
    config: ModelConfig,
    layer: int,
    direction: np.ndarray,
    target_token: int,
    strength: float = 4.0,
) -> ToyTransformer:
    """
    Builds a toy transformer whose response to steering along `direction` is known in closed form.

    The unembedding row of `target_token` is given a component of size `strength` along u, and
    every other row is made orthogonal to u. With injection at the last layer and an identity
    final norm, adding alpha * u changes logit(t) by exactly alpha * slope and leaves every other
    logit unchanged.

    Args:
        seed (int): Seed of the base weights.
        config (ModelConfig): Model shape; `final_norm` must be `identity`.
        layer (int): Layer to plant at; must be the last layer.
        direction (np.ndarray): Direction u; normalized before use.
        target_token (int): Token id t.
        strength (float): Component of the target's unembedding row along u.

    Returns:
        ToyTransformer: The model, with the slope recorded in `planted`.

    Raises:
        InvalidConfig: If the layer is not the last one, or the final norm is not the identity.

    """
    config.check()
    if layer != config.layer_count:
        raise InvalidConfig(f"Planted layer must be the last layer ({config.layer_count}), got {layer}")
    if config.final_norm != FinalNorm.IDENTITY:
        raise InvalidConfig("Planted models require final_norm = identity")
    if not 0 <= target_token < config.vocab_size:
        raise TokenOutOfRange(f"Target token {target_token} is outside a vocabulary of {config.vocab_size}")

    model = build(seed, config)
    u = unit(direction)

    unembedding = model.unembedding - np.outer(model.unembedding @ u, u)
    unembedding[target_token] += strength * u

    slope = dot(unembedding[target_token], u)
    planted = PlantedDirection(layer=layer, direction=u, target_token=target_token, slope=slope)
    logger.debug(f"Planted direction at layer {layer} for token {target_token} with slope {slope:.6f}")
    return model.model_copy(update={"unembedding": unembedding, "planted": planted})


def forward_with_taps(
    model: ToyTransformer,
    token_ids: list[int],
    hook: InjectionHook | None = None,
) -> tuple[np.ndarray, ActivationTrace]:
    """
    Runs a causal forward pass and records every layer's post-block activations.

    Args:
        model (ToyTransformer): The model.
        token_ids (list[int]): Nonempty input sequence.
        hook (InjectionHook | None): Optional injection applied from the last input token onward (or from the
            hook's own `start_position`).

    Returns:
        tuple[np.ndarray, ActivationTrace]: (positions, V) logits and the activation trace.

    Raises:
        TokenOutOfRange: If an id is outside the vocabulary.

    """
    state = _DecodeState(model, hook)
    logits = state.extend(list(token_ids))
    return logits, state.trace()


def generate_with_trace(
    model: ToyTransformer,
    prompt_ids: list[int],
    max_new_tokens: int,
    hook: InjectionHook | None = None,
    eos_id: int | None = None,
) -> GenerationResult:
    """
    Greedy decoding that also returns step logits and the activation trace.

    Ties in the argmax are broken by the lowest token id. Decoding stops after `eos_id` is
    emitted or after `max_new_tokens` tokens.

    Args:
        model (ToyTransformer): The model.
        prompt_ids (list[int]): Nonempty prompt.
        max_new_tokens (int): Maximum number of new tokens; at least 1.
        hook (InjectionHook | None): Optional injection, applied from the last prompt token onward.
        eos_id (int | None): End-of-sequence id.

    Returns:
        GenerationResult: The new tokens, the logits each was chosen from, and the trace.

    """
    if max_new_tokens < 1:
        raise InvalidConfig(f"max_new_tokens must be at least 1, got {max_new_tokens}")

    state = _DecodeState(model, hook)
    logits = state.extend(list(prompt_ids))

    tokens: list[int] = []
    step_logits: list[np.ndarray] = []
    for step in range(max_new_tokens):
        last = logits[-1]
        token = int(np.argmax(last))
        tokens.append(token)
        step_logits.append(last)

        if token == eos_id or step == max_new_tokens - 1:
            break
        logits = state.extend([token])

    return GenerationResult(tokens=tokens, step_logits=np.stack(step_logits), trace=state.trace())


def generate(
    model: ToyTransformer,
    prompt_ids: list[int],
    max_new_tokens: int,
    hook: InjectionHook | None = None,
    eos_id: int | None = None,
) -> list[int]:
    """Greedy decoding; see `generate_with_trace`."""
    return generate_with_trace(model, prompt_ids, max_new_tokens, hook=hook, eos_id=eos_id).tokens


def sequence_perplexity(logits: np.ndarray, token_ids: list[int]) -> float:
    """
    Perplexity of a sequence given the logits of a forward pass over it.

    Args:
        logits (np.ndarray): (m, V) logits; row i predicts token i + 1.
        token_ids (list[int]): The m tokens.

    Returns:
        float: exp of the mean negative log-likelihood of tokens 2..m.

    """
    if len(token_ids) < 2:
        raise SequenceTooShort
    log_probs = _log_softmax(np.asarray(logits, dtype=np.float64)[:-1])
    targets = np.asarray(token_ids[1:], dtype=np.int64)
    nll = -log_probs[np.arange(targets.size), targets]
    return math.exp(math.fsum(nll.tolist()) / targets.size)


def perplexity(model: ToyTransformer, token_ids: list[int]) -> float:
    """
    Perplexity of a token sequence under the model.

    Raises:
        SequenceTooShort: If the sequence holds fewer than two tokens.

    """
    if len(token_ids) < 2:
        raise SequenceTooShort
    logits, _ = forward_with_taps(model, token_ids)
    return sequence_perplexity(logits, token_ids)


def save_checkpoint(model: ToyTransformer, path: str | Path) -> None:
    """
    Writes a ROTM checkpoint.

    Layout: header (magic, version, L, d, heads, V, final-norm flag, seed, max_positions,
    mlp_ratio), then `<f8` tensors in order: token embedding, positional embedding, each block's
    fields in declaration order, final gain, final bias, unembedding; then the planted direction
    as a JSON string (empty when absent).

    """
    c = model.config
    writer = BinaryWriter(CHECKPOINT_MAGIC)
    for value in (c.layer_count, c.hidden_dim, c.head_count, c.vocab_size):
        writer.u32(value)
    writer.u8(1 if c.final_norm == FinalNorm.IDENTITY else 0)
    writer.u64(model.seed)
    writer.u32(c.max_positions)
    writer.u32(c.mlp_ratio)

    writer.array(model.token_embedding)
    writer.array(model.position_embedding)
    for block in model.blocks:
        for name in BlockWeights.field_order():
            writer.array(getattr(block, name))
    writer.array(model.final_gain)
    writer.array(model.final_bias)
    writer.array(model.unembedding)

    planted = ""
    if model.planted is not None:
        planted = json.dumps({
            "layer": model.planted.layer,
            "direction": model.planted.direction.tolist(),
            "target_token": model.planted.target_token,
            "slope": model.planted.slope,
        })
    writer.string(planted)

    write_file(path, writer.getvalue())
    logger.info(f"Saved checkpoint for {model.model_id} to '{path}'")


def load_checkpoint(path: str | Path) -> ToyTransformer:
    """
    Reads a ROTM checkpoint written by `save_checkpoint`.

    Raises:
        CorruptFile: On a bad header or truncated tensors.

    """
    reader = BinaryReader(read_file(path), CHECKPOINT_MAGIC)
    layer_count, hidden_dim, head_count, vocab_size = (reader.u32() for _ in range(4))
    final_norm = FinalNorm.IDENTITY if reader.u8() else FinalNorm.STANDARD
    seed = reader.u64()
    config = ModelConfig(
        layer_count=layer_count,
        hidden_dim=hidden_dim,
        head_count=head_count,
        vocab_size=vocab_size,
        final_norm=final_norm,
        max_positions=reader.u32(),
        mlp_ratio=reader.u32(),
    )
    config.check()

    d, hidden = config.hidden_dim, config.hidden_dim * config.mlp_ratio
    shapes = {
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_o": (d, d),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
        "w_in": (d, hidden),
        "b_in": (hidden,),
        "w_out": (hidden, d),
        "b_out": (d,),
    }

    def tensor(*shape: int) -> np.ndarray:
        return reader.array(math.prod(shape)).reshape(shape)

    token_embedding = tensor(vocab_size, d)
    position_embedding = tensor(config.max_positions, d)
    blocks = [
        BlockWeights(**{name: tensor(*shapes[name]) for name in BlockWeights.field_order()})
        for _ in range(layer_count)
    ]
    final_gain, final_bias = tensor(d), tensor(d)
    unembedding = tensor(vocab_size, d)

    planted = None
    planted_json = reader.string()
    if planted_json:
        fields = json.loads(planted_json)
        planted = PlantedDirection(
            layer=fields["layer"],
            direction=np.asarray(fields["direction"], dtype=np.float64),
            target_token=fields["target_token"],
            slope=fields["slope"],
        )
    reader.expect_end()

    return ToyTransformer(
        config=config,
        seed=seed,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        blocks=blocks,
        final_gain=final_gain,
        final_bias=final_bias,
        unembedding=unembedding,
        planted=planted,
    )
