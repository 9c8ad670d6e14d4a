from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cot_repe.enum import OrientationRule, StimulusKind
from cot_repe.exceptions import CorruptFile, DegenerateInput, IoFailure, LayerMismatch, NormViolation
from cot_repe.formats import READERS_MAGIC, BinaryReader, BinaryWriter, read_file, write_file
from cot_repe.linalg import EigenPair, dot, leading_eigenpair
from cot_repe.populations import PopulationSet

__all__ = [
    "NORM_TOLERANCE",
    "ReaderProvenance",
    "ReadingVectorSet",
    "export_text",
    "extract_reading_vectors",
    "load_reading_vectors",
    "orient",
    "save_reading_vectors",
    "write_text_export",
]

NORM_TOLERANCE = 1e-6


class ReaderProvenance(BaseModel):
    """
    Where a set of reading vectors came from.

    Attributes:
        population_digest (str): Digest of the population the vectors were fit on.
        stimulus_digest (str): Digest of the stimulus set behind that population.
        model_id (str): Id of the activation source.
        query_count (int): N.
        stimuli_count (int): M.
        stimulus_kind (StimulusKind): Form of the stimuli.
        stimulus_label (str): Label of the stimulus variant (e.g. `Z1`), when known.

    """

    model_config = ConfigDict(protected_namespaces=())

    population_digest: str = ""
    stimulus_digest: str = ""
    model_id: str = ""
    query_count: int = 0
    stimuli_count: int = 0
    stimulus_kind: StimulusKind = StimulusKind.ZERO_SHOT
    stimulus_label: str = ""


class ReadingVectorSet(BaseModel):
    """
    Per-layer unit reading vectors R_k.

    Attributes:
        vectors (dict[int, np.ndarray]): Unit direction per layer.
        explained_variance (dict[int, float]): Share of the population variance along each direction.
        orientation (OrientationRule): Rule that fixed the sign of each direction.
        center (bool): Whether the population was mean-centered before PCA.
        provenance (ReaderProvenance): Origin of the vectors.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    vectors: dict[int, np.ndarray] = Field(default=..., description="Unit direction per layer.")
    explained_variance: dict[int, float] = Field(default_factory=dict, description="Variance share per layer.")
    orientation: OrientationRule = Field(default=OrientationRule.MEAN_PROJECTION, description="Sign rule.")
    center: bool = Field(default=False, description="Whether the population was mean-centered before PCA.")
    provenance: ReaderProvenance = Field(default_factory=ReaderProvenance, description="Origin of the vectors.")

    @property
    def layers(self) -> list[int]:
        return sorted(self.vectors)

    @property
    def hidden_dim(self) -> int:
        return self.vectors[self.layers[0]].size

    def direction(self, layer: int) -> np.ndarray:
        if layer not in self.vectors:
            raise LayerMismatch(f"No reading vector for layer {layer}; readers cover {self.layers}")
        return self.vectors[layer]

    def projection(self, layer: int, activation: np.ndarray) -> float:
        """Raw projection h . R_k of an activation onto a layer's reading vector."""
        return dot(activation, self.direction(layer))


def orient(
    vector: np.ndarray,
    rule: OrientationRule,
    differences: np.ndarray,
    positives: np.ndarray | None = None,
    negatives: np.ndarray | None = None,
) -> np.ndarray:
    """
    Fixes the sign of a principal direction.

    `mean_projection` flips the vector when the mean projection of the difference rows is
    negative. `pair_alignment` flips it when more pairs have their negative prompt projecting
    higher than their positive prompt; ties keep the solver's sign.

    Args:
        vector (np.ndarray): Unit direction.
        rule (OrientationRule): The orientation rule.
        differences (np.ndarray): Population rows h(p+) - h(p-).
        positives (np.ndarray | None): Positive-prompt activations; defaults to `differences` against zero.
        negatives (np.ndarray | None): Negative-prompt activations.

    Returns:
        np.ndarray: `vector` or `-vector`.

    """
    if rule == OrientationRule.MEAN_PROJECTION:
        mean = math.fsum(dot(row, vector) for row in differences) / len(differences)
        return -vector if mean < 0 else vector

    if positives is None or negatives is None:
        positives, negatives = differences, np.zeros_like(differences)
    positive_higher = negative_higher = 0
    for positive, negative in zip(positives, negatives, strict=True):
        gap = dot(positive, vector) - dot(negative, vector)
        positive_higher += gap > 0
        negative_higher += gap < 0
    return -vector if negative_higher > positive_higher else vector


def extract_reading_vectors(
    population: PopulationSet,
    center: bool = False,
    orientation: OrientationRule = OrientationRule.MEAN_PROJECTION,
    workers: int = 1,
    stimulus_label: str = "",
) -> ReadingVectorSet:
    """
    Fits one reading vector per layer as the leading principal direction of its population.

    Populations are not centered by default: difference vectors share a common offset along the
    stimulus direction, and centering would remove exactly that offset.

    Args:
        population (PopulationSet): The neural populations.
        center (bool): Whether to mean-center each population before PCA.
        orientation (OrientationRule): Read-time sign rule.
        workers (int): Worker threads; layers are independent and merged in layer order.
        stimulus_label (str): Stimulus variant label recorded in provenance.

    Returns:
        ReadingVectorSet: Unit vectors keyed by layer.

    Raises:
        DegenerateInput: If a layer population has fewer than two rows or zero covariance; the error
            names the layer.

    """

    def fit(layer: int) -> EigenPair:
        try:
            pair = leading_eigenpair(population.differences[layer], center=center)
        except DegenerateInput as exc:
            raise DegenerateInput(str(exc), layer=layer) from exc
        vector = orient(
            pair.vector,
            orientation,
            population.differences[layer],
            population.positives.get(layer),
            population.negatives.get(layer),
        )
        return pair._replace(vector=vector)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        pairs = dict(zip(population.layers, executor.map(fit, population.layers)))

    for layer, pair in pairs.items():
        logger.info(f"[layer {layer}] Leading component explains {pair.explained_share:.2%} of the variance")

    return ReadingVectorSet(
        vectors={layer: pair.vector for layer, pair in pairs.items()},
        explained_variance={layer: pair.explained_share for layer, pair in pairs.items()},
        orientation=orientation,
        center=center,
        provenance=ReaderProvenance(
            population_digest=population.digest,
            stimulus_digest=population.stimulus_digest,
            model_id=population.model_id,
            query_count=population.query_count,
            stimuli_count=population.stimuli_count,
            stimulus_kind=population.stimulus_kind,
            stimulus_label=stimulus_label,
        ),
    )


def _encode(readers: ReadingVectorSet) -> bytes:
    writer = BinaryWriter(READERS_MAGIC)
    writer.u32(len(readers.layers))
    writer.u32(readers.hidden_dim)
    writer.u8(1 if readers.center else 0)
    writer.string(readers.orientation.value)
    writer.string(json.dumps(readers.provenance.model_dump(mode="json"), sort_keys=True))
    for layer in readers.layers:
        writer.u32(layer)
        writer.f64(readers.explained_variance.get(layer, 0.0))
        writer.array(readers.vectors[layer])
    return writer.getvalue()


def save_reading_vectors(readers: ReadingVectorSet, path: str | Path) -> None:
    """
    Writes a ROTV file.

    Layout: magic `ROTV`, version u32, layer count u32, d u32, centering flag u8, orientation rule
    (string), provenance (JSON string); then per layer: index u32, explained-variance share f64,
    and d `<f8` values.

    """
    write_file(path, _encode(readers))
    logger.info(f"Saved reading vectors for layers {readers.layers} to '{path}'")


def load_reading_vectors(path: str | Path) -> ReadingVectorSet:
    """
    Reads a ROTV file and checks that every vector is unit-norm.

    Raises:
        IoFailure: If the file cannot be read.
        CorruptFile: On a bad header or truncation.
        NormViolation: If a vector's norm differs from 1 by more than 1e-6.

    """
    reader = BinaryReader(read_file(path), READERS_MAGIC)
    layer_count = reader.u32()
    hidden_dim = reader.u32()
    center = bool(reader.u8())
    try:
        orientation = OrientationRule(reader.string())
        provenance = ReaderProvenance.model_validate_json(reader.string())
    except ValueError as exc:
        raise CorruptFile(f"Invalid reading-vector header in '{path}'") from exc

    vectors: dict[int, np.ndarray] = {}
    explained: dict[int, float] = {}
    for _ in range(layer_count):
        layer = reader.u32()
        explained[layer] = reader.f64()
        vector = reader.array(hidden_dim)
        norm = float(np.linalg.norm(vector))
        if not abs(norm - 1.0) <= NORM_TOLERANCE:
            raise NormViolation(f"[layer {layer}] Stored direction has norm {norm}")
        vectors[layer] = vector
    reader.expect_end()

    if not vectors:
        raise CorruptFile(f"'{path}' holds no reading vectors")

    return ReadingVectorSet(
        vectors=vectors,
        explained_variance=explained,
        orientation=orientation,
        center=center,
        provenance=provenance,
    )


def export_text(readers: ReadingVectorSet) -> str:
    """Plain-text export: one line per layer holding the index followed by the d values."""
    lines = [" ".join([str(layer), *(format(value, ".17g") for value in readers.vectors[layer])]) for layer in readers.layers]
    return "\n".join(lines) + "\n"


def write_text_export(readers: ReadingVectorSet, path: str | Path) -> None:
    try:
        Path(path).write_text(export_text(readers), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Could not write '{path}': {exc}") from exc
