from __future__ import annotations

import hashlib
import importlib.resources
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from functools import cache, cached_property
from typing import Any, Protocol

import numpy as np
from loguru import logger
from parsimonious.exceptions import ParseError
from parsimonious.nodes import Node
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cot_repe.enum import StimulusKind
from cot_repe.exceptions import LayerOutOfRange, LayerSpecInvalid
from cot_repe.parsimonious.grammar import Grammar
from cot_repe.parsimonious.nodes import NodeVisitor
from cot_repe.stimuli import StimulusSet

__all__ = [
    "ActivationSource",
    "LayerSelection",
    "LayerSpec",
    "PopulationSet",
    "capture_population",
    "parse_layer_spec",
    "resolve_layers",
]


class ActivationSource(Protocol):
    """Anything that yields last-token activations of a prompt: a live `ModelRunner` or a `DumpSource`."""

    @property
    def model_id(self) -> str: ...

    @property
    def hidden_dim(self) -> int: ...

    def last_token_activations(self, prompt: str, layers: Iterable[int]) -> dict[int, np.ndarray]: ...


class LayerSpec(BaseModel):
    """
    Parsed layer specification: either the last L layers or an explicit index list.

    Attributes:
        last (int | None): Number of trailing layers, for `last:L` / `last(L)`.
        indices (list[int] | None): Explicit layer indices, for `8,9,10` or `4-6`.

    """

    last: int | None = Field(default=None, description="Number of trailing layers.")
    indices: list[int] | None = Field(default=None, description="Explicit layer indices.")


class LayerSpecVisitor(NodeVisitor):
    """Visitor class for serializing a parsed layer specification."""

    model_class: type[LayerSpec] = LayerSpec

    def visit_spec(self, node: Node, visited_children: list[Any]) -> dict[str, Any]:
        return next(child for child in self.flatten(visited_children) if isinstance(child, dict))

    def visit_last(self, node: Node, visited_children: list[Any]) -> dict[str, int]:
        (count,) = (child for child in self.flatten(visited_children) if isinstance(child, int))
        return {"last": count}

    def visit_indices(self, node: Node, visited_children: list[Any]) -> dict[str, list[int]]:
        return {"indices": [child for child in self.flatten(visited_children) if isinstance(child, int)]}

    def visit_span(self, node: Node, visited_children: list[Any]) -> list[int]:
        first, last = (child for child in self.flatten(visited_children) if isinstance(child, int))
        if first > last:
            raise LayerSpecInvalid(f"Descending layer range '{node.text}'")
        return list(range(first, last + 1))

    def visit_count(self, node: Node, visited_children: list[Any]) -> int:
        return int(node.text)

    def visit_index(self, node: Node, visited_children: list[Any]) -> int:
        return int(node.text)


@cache
def _layer_grammar() -> Grammar:
    rules = importlib.resources.files("cot_repe").joinpath("parsimonious", "layers.peg")
    return Grammar(rules)


def parse_layer_spec(spec: str) -> LayerSpec:
    """
    Parses `last:L`, `last(L)`, comma-separated indices and inclusive ranges such as `2,4-6`.

    Raises:
        LayerSpecInvalid: On a syntax error or a descending range.

    """
    try:
        tree = _layer_grammar().parse(spec)
    except ParseError as exc:
        raise LayerSpecInvalid(f"Could not parse layer specification '{spec}'") from exc
    return LayerSpecVisitor().serialize(tree)


class LayerSelection(BaseModel):
    """
    A layer specification resolved against a model depth.

    Attributes:
        spec (str): The specification as written.
        layers (list[int]): Sorted, distinct 1-based layer indices.

    """

    spec: str
    layers: list[int]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


def resolve_layers(spec: str | list[int], depth: int) -> LayerSelection:
    """
    Resolves a layer specification against a model depth.

    Args:
        spec (str | list[int]): Specification text, or explicit indices.
        depth (int): Number of layers of the model (or dump).

    Returns:
        LayerSelection: `last:L` gives {depth - L + 1, ..., depth}.

    Raises:
        LayerOutOfRange: If L exceeds the depth, or an index lies outside 1..depth.
        LayerSpecInvalid: If the text cannot be parsed.

    """
    if isinstance(spec, str):
        text = spec
        parsed = parse_layer_spec(spec)
    else:
        text = ",".join(str(k) for k in spec)
        parsed = LayerSpec(indices=list(spec))

    if parsed.last is not None:
        if not 1 <= parsed.last <= depth:
            raise LayerOutOfRange(f"Cannot take the last {parsed.last} layers of a model of depth {depth}")
        layers = list(range(depth - parsed.last + 1, depth + 1))
    else:
        layers = sorted(set(parsed.indices or []))
        bad = [k for k in layers if not 1 <= k <= depth]
        if bad or not layers:
            raise LayerOutOfRange(f"Layers {bad or '[]'} are outside 1..{depth}")

    return LayerSelection(spec=text, layers=layers)


class PopulationSet(BaseModel):
    """
    Neural populations: per layer, the last-token activation differences h(p+) - h(p-) of every
    prompt pair, one row per pair in stimulus-set order.

    Attributes:
        layers (list[int]): Captured layers.
        differences (dict[int, np.ndarray]): Per layer, an (N*M, d) matrix of difference vectors.
        positives (dict[int, np.ndarray]): Per layer, positive-prompt activations in the same row order.
        negatives (dict[int, np.ndarray]): Per layer, negative-prompt activations in the same row order.
        pair_ids (list[str]): Pair id of each row.
        stimulus_digest (str): Digest of the stimulus set the population was captured from.
        model_id (str): Id of the activation source.
        capture_position (str): Token position activations were read at.
        query_count (int): N.
        stimuli_count (int): M.
        stimulus_kind (StimulusKind): Form of the stimuli.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True, protected_namespaces=())

    layers: list[int]
    differences: dict[int, np.ndarray]
    positives: dict[int, np.ndarray]
    negatives: dict[int, np.ndarray]
    pair_ids: list[str]
    stimulus_digest: str
    model_id: str
    capture_position: str = "last_token"
    query_count: int
    stimuli_count: int
    stimulus_kind: StimulusKind

    @model_validator(mode="after")
    def validate_rows(self) -> PopulationSet:
        for k in self.layers:
            if self.differences[k].shape[0] != len(self.pair_ids):
                raise ValueError(f"Layer {k} holds {self.differences[k].shape[0]} rows for {len(self.pair_ids)} pairs")
        return self

    @property
    def hidden_dim(self) -> int:
        return self.differences[self.layers[0]].shape[1]

    @cached_property
    def digest(self) -> str:
        hasher = hashlib.blake2b(digest_size=16)
        hasher.update(self.stimulus_digest.encode())
        for k in self.layers:
            hasher.update(k.to_bytes(4, "little"))
            hasher.update(np.ascontiguousarray(self.differences[k], dtype="<f8").tobytes())
        return hasher.hexdigest()


def capture_population(
    source: ActivationSource,
    stimulus_set: StimulusSet,
    layers: LayerSelection | list[int],
    workers: int = 1,
) -> PopulationSet:
    """
    Captures last-token activations of every prompt and forms per-layer difference vectors.

    Each distinct prompt text is run once; forward passes run on a thread pool and are merged in
    stimulus-set order, so the result does not depend on `workers`.

    Args:
        source (ActivationSource): Live model runner or dump source.
        stimulus_set (StimulusSet): The contrastive corpus.
        layers (LayerSelection | list[int]): Layers to capture.
        workers (int): Worker threads.

    Returns:
        PopulationSet: The populations.

    Raises:
        EmptyPrompt: If a prompt tokenizes to nothing (live source).
        DumpMissingLayer: If the dump lacks a requested layer.
        DumpMissingPrompt: If the dump lacks a prompt.

    """
    layers = list(layers)
    prompts = list(dict.fromkeys(text for pair in stimulus_set.pairs for text in (pair.positive, pair.negative)))

    logger.info(
        f"Capturing {len(stimulus_set.pairs)} prompt pair(s) ({len(prompts)} distinct prompts) over layers {layers}"
    )
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        captured = dict(zip(prompts, executor.map(lambda p: source.last_token_activations(p, layers), prompts)))

    positives = {k: np.stack([captured[pair.positive][k] for pair in stimulus_set.pairs]) for k in layers}
    negatives = {k: np.stack([captured[pair.negative][k] for pair in stimulus_set.pairs]) for k in layers}

    return PopulationSet(
        layers=layers,
        differences={k: positives[k] - negatives[k] for k in layers},
        positives=positives,
        negatives=negatives,
        pair_ids=[pair.pair_id for pair in stimulus_set.pairs],
        stimulus_digest=stimulus_set.digest,
        model_id=source.model_id,
        query_count=stimulus_set.query_count,
        stimuli_count=stimulus_set.stimuli_count,
        stimulus_kind=stimulus_set.stimulus_kind,
    )
