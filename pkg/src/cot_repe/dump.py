"""
Activation dumps (ROTD): last-token activations of prompts, written by any model and read back as
an activation source, so populations and prefix scores can be computed for models hosted outside
this package.

Layout: magic `ROTD`, version u32, model id (string), d u32, layer count u32, layer indices u32
each, record count u32, dtype flag u8 (4 = `<f4`, 8 = `<f8`); then per record: prompt text
(string), polarity byte (`+`, `-` or `.`), and one d-vector per header layer, in header order.
A record's id is its prompt text; records of response prefixes use the prefix text.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cot_repe.enum import Polarity
from cot_repe.exceptions import CorruptFile, DumpMissingLayer, DumpMissingPrompt
from cot_repe.formats import DUMP_MAGIC, BinaryReader, BinaryWriter, read_file, write_file

__all__ = [
    "ActivationDump",
    "DumpRecord",
    "DumpSource",
    "dump_prefixes",
    "dump_prompts",
    "dump_stimulus_set",
    "load_dump",
    "prefix_texts",
    "save_dump",
]

_DTYPES = {4: "<f4", 8: "<f8"}


class DumpRecord(BaseModel):
    """Last-token activations of one prompt, one vector per dumped layer."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    prompt: str = Field(default=..., description="Prompt text; doubles as the record id.")
    polarity: Polarity = Field(default=Polarity.NONE, description="Whether the prompt carries the stimulus.")
    vectors: np.ndarray = Field(default=..., description="(layer count, d) activations in header layer order.")


class ActivationDump(BaseModel):
    """
    Contents of a ROTD file.

    Attributes:
        model_id (str): Id of the model that produced the activations.
        hidden_dim (int): Width d of every vector.
        layers (list[int]): Dumped layer indices, in storage order.
        dtype (Literal["f4", "f8"]): Storage precision of the vectors.
        records (list[DumpRecord]): One record per prompt.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True, protected_namespaces=())

    model_id: str
    hidden_dim: int
    layers: list[int]
    dtype: Literal["f4", "f8"] = "f8"
    records: list[DumpRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_shapes(self) -> ActivationDump:
        expected = (len(self.layers), self.hidden_dim)
        for record in self.records:
            if record.vectors.shape != expected:
                raise ValueError(f"Record '{record.prompt[:40]}' has shape {record.vectors.shape}, expected {expected}")
        return self


def save_dump(dump: ActivationDump, path: str | Path) -> None:
    writer = BinaryWriter(DUMP_MAGIC)
    writer.string(dump.model_id)
    writer.u32(dump.hidden_dim)
    writer.u32(len(dump.layers))
    for layer in dump.layers:
        writer.u32(layer)
    writer.u32(len(dump.records))
    itemsize = 4 if dump.dtype == "f4" else 8
    writer.u8(itemsize)

    for record in dump.records:
        writer.string(record.prompt)
        writer.u8(ord(record.polarity.value))
        writer.array(record.vectors, dtype=_DTYPES[itemsize])

    write_file(path, writer.getvalue())
    logger.info(f"Wrote {len(dump.records)} record(s) over layers {dump.layers} to '{path}'")


def load_dump(path: str | Path) -> ActivationDump:
    """
    Reads a ROTD file.

    Raises:
        CorruptFile: On a bad header, an unknown polarity or dtype flag, or truncation.

    """
    reader = BinaryReader(read_file(path), DUMP_MAGIC)
    model_id = reader.string()
    hidden_dim = reader.u32()
    layers = [reader.u32() for _ in range(reader.u32())]
    record_count = reader.u32()
    itemsize = reader.u8()
    if itemsize not in _DTYPES:
        raise CorruptFile(f"Unknown dtype flag {itemsize}")

    records = []
    for _ in range(record_count):
        prompt = reader.string()
        try:
            polarity = Polarity(chr(reader.u8()))
        except ValueError as exc:
            raise CorruptFile("Unknown polarity byte") from exc
        vectors = reader.array(len(layers) * hidden_dim, dtype=_DTYPES[itemsize]).reshape(len(layers), hidden_dim)
        records.append(DumpRecord(prompt=prompt, polarity=polarity, vectors=vectors))
    reader.expect_end()

    return ActivationDump(
        model_id=model_id,
        hidden_dim=hidden_dim,
        layers=layers,
        dtype="f4" if itemsize == 4 else "f8",
        records=records,
    )


def prefix_texts(prompt: str, response_tokens: Sequence[str]) -> list[str]:
    """Record ids of the prefixes T ⊕ y_{<=i}, i = 0..m, as written by `dump_prefixes`."""
    return [prompt] + [f"{prompt} {' '.join(response_tokens[:i])}" for i in range(1, len(response_tokens) + 1)]


class DumpSource:
    """
    Activation source backed by a dump, interchangeable with a live `ModelRunner`.

    Attributes:
        dump (ActivationDump): The loaded dump.

    """

    def __init__(self, dump: ActivationDump) -> None:
        self.dump = dump

    @classmethod
    def from_file(cls, path: str | Path) -> DumpSource:
        return cls(load_dump(path))

    @property
    def model_id(self) -> str:
        return self.dump.model_id

    @property
    def hidden_dim(self) -> int:
        return self.dump.hidden_dim

    @property
    def layers(self) -> list[int]:
        return list(self.dump.layers)

    @cached_property
    def _index(self) -> dict[str, DumpRecord]:
        return {record.prompt: record for record in self.dump.records}

    def _rows(self, layers: Iterable[int]) -> list[int]:
        positions = {layer: row for row, layer in enumerate(self.dump.layers)}
        rows = []
        for layer in layers:
            if layer not in positions:
                raise DumpMissingLayer(f"Dump holds layers {self.dump.layers}, not {layer}")
            rows.append(positions[layer])
        return rows

    def _record(self, prompt: str) -> DumpRecord:
        try:
            return self._index[prompt]
        except KeyError:
            raise DumpMissingPrompt(f"No dump record for prompt '{prompt[:60]}'") from None

    def last_token_activations(self, prompt: str, layers: Iterable[int]) -> dict[int, np.ndarray]:
        layers = list(layers)
        rows = self._rows(layers)
        record = self._record(prompt)
        return {layer: record.vectors[row].copy() for layer, row in zip(layers, rows, strict=True)}

    def prefix_activations(self, prompt: str, response_tokens: list[str], layers: Iterable[int]) -> np.ndarray:
        layers = list(layers)
        rows = self._rows(layers)
        return np.stack([self._record(text).vectors[rows] for text in prefix_texts(prompt, response_tokens)])


def dump_prompts(
    source,
    prompts: Sequence[tuple[str, Polarity]],
    layers: Sequence[int],
    dtype: Literal["f4", "f8"] = "f8",
    workers: int = 1,
) -> ActivationDump:
    """
    Reference writer: captures last-token activations of each prompt from a live source.

    Args:
        source (ModelRunner): The live model.
        prompts (Sequence[tuple[str, Polarity]]): Prompts with their polarity, in record order.
        layers (Sequence[int]): Layers to dump.
        dtype (Literal["f4", "f8"]): Storage precision.
        workers (int): Worker threads; records stay in input order.

    Returns:
        ActivationDump: The dump, ready for `save_dump`.

    """
    layers = list(layers)

    def capture(prompt: str) -> np.ndarray:
        activations = source.last_token_activations(prompt, layers)
        return np.stack([activations[k] for k in layers])

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        vectors = list(executor.map(capture, [prompt for prompt, _ in prompts]))

    records = [
        DumpRecord(prompt=prompt, polarity=polarity, vectors=rows)
        for (prompt, polarity), rows in zip(prompts, vectors, strict=True)
    ]
    return ActivationDump(
        model_id=source.model_id,
        hidden_dim=source.hidden_dim,
        layers=layers,
        dtype=dtype,
        records=records,
    )


def dump_stimulus_set(source, stimulus_set, layers: Sequence[int], dtype: Literal["f4", "f8"] = "f8", workers: int = 1):
    """Reference writer for every distinct prompt of a stimulus set, positives tagged `+` and negatives `-`."""
    prompts: dict[str, Polarity] = {}
    for pair in stimulus_set.pairs:
        prompts.setdefault(pair.positive, Polarity.POSITIVE)
        prompts.setdefault(pair.negative, Polarity.NEGATIVE)
    return dump_prompts(source, list(prompts.items()), layers, dtype=dtype, workers=workers)


def dump_prefixes(source, prompt: str, response_tokens: Sequence[str], layers: Sequence[int]) -> ActivationDump:
    """
    Reference writer for response prefixes, keyed by `prefix_texts`.

    Activations come from one forward pass over the full sequence, which equals per-prefix
    forwards by causality.

    """
    layers = list(layers)
    activations = source.prefix_activations(prompt, list(response_tokens), layers)
    records = [
        DumpRecord(prompt=text, polarity=Polarity.NONE, vectors=activations[i])
        for i, text in enumerate(prefix_texts(prompt, response_tokens))
    ]
    return ActivationDump(model_id=source.model_id, hidden_dim=source.hidden_dim, layers=layers, records=records)
