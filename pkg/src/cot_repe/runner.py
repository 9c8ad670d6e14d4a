from __future__ import annotations

from collections.abc import Iterable

import numpy as np
from loguru import logger

from cot_repe.config import RunConfig
from cot_repe.exceptions import EmptyPrompt, InvalidConfig, LayerOutOfRange
from cot_repe.model import (
    GenerationResult,
    InjectionHook,
    ModelConfig,
    ToyTransformer,
    build,
    forward_with_taps,
    generate_with_trace,
    load_checkpoint,
    perplexity,
)
from cot_repe.tokenizer import Tokenizer

__all__ = ["ModelRunner", "open_runner"]


class ModelRunner:
    """
    Binds a toy transformer to its tokenizer and exposes text-level operations.

    The runner is the live activation source for population capture and prefix scoring, and the
    text generator of the benchmark. Prompts are encoded with a leading `<bos>`.

    Attributes:
        model (ToyTransformer): The model.
        tokenizer (Tokenizer): The tokenizer; its size must equal the model's vocabulary size.

    """

    def __init__(self, model: ToyTransformer, tokenizer: Tokenizer) -> None:
        if model.config.vocab_size != tokenizer.size:
            raise InvalidConfig(
                f"Model vocabulary ({model.config.vocab_size}) does not match the lexicon ({tokenizer.size})"
            )
        self.model = model
        self.tokenizer = tokenizer

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def hidden_dim(self) -> int:
        return self.model.config.hidden_dim

    @property
    def layers(self) -> list[int]:
        return list(range(1, self.model.depth + 1))

    def _check_layers(self, layers: Iterable[int]) -> list[int]:
        layers = list(layers)
        bad = [k for k in layers if not 1 <= k <= self.model.depth]
        if bad:
            raise LayerOutOfRange(f"Layers {bad} are outside a model of depth {self.model.depth}")
        return layers

    def encode_prompt(self, prompt: str) -> list[int]:
        """
        Encodes a prompt with a leading `<bos>`.

        Raises:
            EmptyPrompt: If the prompt holds no tokens.

        """
        ids = self.tokenizer.encode(prompt)
        if not ids:
            raise EmptyPrompt
        return [self.tokenizer.bos_id, *ids]

    def last_token_activations(self, prompt: str, layers: Iterable[int]) -> dict[int, np.ndarray]:
        """Post-block activations at the prompt's last token, per requested layer."""
        layers = self._check_layers(layers)
        _, trace = forward_with_taps(self.model, self.encode_prompt(prompt))
        return {k: trace.last_prompt_token(k).copy() for k in layers}

    def prefix_activations(self, prompt: str, response_tokens: list[str], layers: Iterable[int]) -> np.ndarray:
        """
        Activations of every prefix T ⊕ y_{<=i}, i = 0..m, from a single forward pass.

        Returns:
            np.ndarray: (m + 1, len(layers), d) array; row 0 is the prompt's last token.

        """
        layers = self._check_layers(layers)
        prompt_ids = self.encode_prompt(prompt)
        response_ids = self.tokenizer.encode_tokens(list(response_tokens))
        _, trace = forward_with_taps(self.model, prompt_ids + response_ids)

        start = len(prompt_ids) - 1
        return np.stack([trace.layer(k)[start:] for k in layers], axis=1)

    def perplexity_of(self, text: str) -> float:
        return perplexity(self.model, self.encode_prompt(text))

    def generate(self, prompt: str, max_new_tokens: int, hook: InjectionHook | None = None) -> GenerationResult:
        return generate_with_trace(
            self.model,
            self.encode_prompt(prompt),
            max_new_tokens,
            hook=hook,
            eos_id=self.tokenizer.eos_id,
        )

    def complete(self, prompt: str, max_new_tokens: int, hook: InjectionHook | None = None) -> str:
        """Greedy continuation of a prompt, decoded to text."""
        return self.tokenizer.decode(self.generate(prompt, max_new_tokens, hook=hook).tokens)


def open_runner(config: RunConfig, tokenizer: Tokenizer | None = None) -> ModelRunner:
    """
    Loads the configured checkpoint, or builds a toy model from the configured seed.

    The build seed is `derive_seed(config.seed, "model")` and the vocabulary size is taken from the
    lexicon.

    """
    tokenizer = tokenizer or Tokenizer.bundled()
    if config.model is not None:
        model = load_checkpoint(config.model)
    else:
        model = build(
            config.seed_for("model"),
            ModelConfig(
                layer_count=config.layer_count,
                hidden_dim=config.hidden_dim,
                head_count=config.head_count,
                vocab_size=tokenizer.size,
                final_norm=config.final_norm,
            ),
        )
    logger.info(f"Using model {model.model_id}")
    return ModelRunner(model, tokenizer)
