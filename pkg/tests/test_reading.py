import numpy as np
import pytest

from cot_repe.enum import OrientationRule
from cot_repe.exceptions import CorruptFile, DegenerateInput, IoFailure, LayerMismatch, NormViolation
from cot_repe.formats import READERS_MAGIC, BinaryWriter
from cot_repe.linalg import cosine, unit
from cot_repe.reading import (
    ReadingVectorSet,
    export_text,
    extract_reading_vectors,
    load_reading_vectors,
    orient,
    save_reading_vectors,
)


@pytest.fixture
def direction(rng):
    return unit(rng.normal(size=16))


def test_recovers_the_planted_direction(direction, rng, make_population):
    population = make_population(direction, rows=64, sigma=0.05, rng=rng, layers=(2, 3))
    readers = extract_reading_vectors(population)
    assert readers.layers == [2, 3]
    for k in readers.layers:
        assert cosine(readers.direction(k), direction) > 0.99
        assert np.linalg.norm(readers.direction(k)) == pytest.approx(1.0, abs=1e-12)
        assert 0.0 < readers.explained_variance[k] <= 1.0


def test_centered_pca_recovers_a_spread_direction(direction, rng, make_population):
    population = make_population(direction, rows=64, sigma=0.05, rng=rng)
    readers = extract_reading_vectors(population, center=True)
    assert readers.center
    assert cosine(readers.direction(1), direction) > 0.99


def test_identical_rows_give_their_own_direction(as_population):
    vector = np.array([3.0, -4.0, 0.0])
    readers = extract_reading_vectors(as_population({1: np.tile(vector, (5, 1))}))
    assert not readers.center
    np.testing.assert_allclose(readers.direction(1), vector / 5.0, atol=1e-9)


def test_orientation_follows_the_majority_row(as_population):
    u = unit(np.array([1.0, 2.0, 2.0]))
    readers = extract_reading_vectors(as_population({1: np.stack([u, -u, u])}))
    np.testing.assert_allclose(readers.direction(1), u, atol=1e-9)


@pytest.mark.parametrize("center", [False, True])
@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_scaling_the_population_leaves_the_readers_unchanged(direction, rng, make_population, as_population, center, scale):
    rows = make_population(direction, rows=32, sigma=0.3, rng=rng).differences[1]
    original = extract_reading_vectors(as_population({1: rows}), center=center)
    scaled = extract_reading_vectors(as_population({1: scale * rows}), center=center)
    np.testing.assert_allclose(scaled.direction(1), original.direction(1), atol=1e-9)


@pytest.mark.parametrize("rule", list(OrientationRule))
def test_orientation_points_from_negative_to_positive(direction, rng, make_population, rule):
    population = make_population(direction, rows=32, sigma=0.05, rng=rng)
    flipped = orient(-direction, rule, population.differences[1], population.positives[1], population.negatives[1])
    np.testing.assert_array_equal(flipped, direction)
    kept = orient(direction, rule, population.differences[1], population.positives[1], population.negatives[1])
    np.testing.assert_array_equal(kept, direction)


def test_extraction_does_not_depend_on_worker_count(direction, rng, make_population):
    population = make_population(direction, rows=24, sigma=0.3, rng=rng, layers=(1, 2, 3))
    serial = extract_reading_vectors(population, workers=1)
    pooled = extract_reading_vectors(population, workers=3)
    for k in (1, 2, 3):
        np.testing.assert_array_equal(serial.direction(k), pooled.direction(k))


def test_provenance(direction, rng, make_population):
    population = make_population(direction, rows=8, sigma=0.1, rng=rng)
    readers = extract_reading_vectors(population, stimulus_label="Z1")
    assert readers.provenance.population_digest == population.digest
    assert readers.provenance.stimulus_label == "Z1"
    assert readers.provenance.query_count == 8


def test_degenerate_population_names_the_layer(make_population, rng):
    population = make_population(np.zeros(16), rows=8, sigma=0.0, rng=rng, layers=(4,))
    with pytest.raises(DegenerateInput) as excinfo:
        extract_reading_vectors(population)
    assert excinfo.value.layer == 4
    assert "[layer 4]" in str(excinfo.value)


def test_missing_layer(direction):
    readers = ReadingVectorSet(vectors={2: direction})
    with pytest.raises(LayerMismatch):
        readers.direction(3)
    assert readers.projection(2, 2.0 * direction) == pytest.approx(2.0)


def test_file_round_trip_is_byte_exact(tmp_path, direction, rng, make_population):
    readers = extract_reading_vectors(make_population(direction, rows=16, sigma=0.1, rng=rng, layers=(1, 3)))
    path = tmp_path / "readers.rotv"
    save_reading_vectors(readers, path)
    loaded = load_reading_vectors(path)

    assert loaded.layers == readers.layers
    assert loaded.provenance == readers.provenance
    assert loaded.explained_variance == readers.explained_variance
    for k in readers.layers:
        np.testing.assert_array_equal(loaded.direction(k), readers.direction(k))

    save_reading_vectors(loaded, tmp_path / "again.rotv")
    assert (tmp_path / "again.rotv").read_bytes() == path.read_bytes()


def _rotv_with(vector: np.ndarray) -> bytes:
    writer = BinaryWriter(READERS_MAGIC)
    writer.u32(1)
    writer.u32(vector.size)
    writer.u8(1)
    writer.string("mean_projection")
    writer.string("{}")
    writer.u32(1)
    writer.f64(1.0)
    writer.array(vector)
    return writer.getvalue()


def test_non_unit_vector_is_rejected(tmp_path):
    path = tmp_path / "readers.rotv"
    path.write_bytes(_rotv_with(np.full(4, 0.6)))
    with pytest.raises(NormViolation):
        load_reading_vectors(path)


def test_unknown_orientation_is_corrupt(tmp_path):
    path = tmp_path / "readers.rotv"
    path.write_bytes(_rotv_with(unit(np.ones(4))).replace(b"mean_projection", b"mean_directions"))
    with pytest.raises(CorruptFile):
        load_reading_vectors(path)


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_reading_vectors(tmp_path / "absent.rotv")


def test_text_export():
    readers = ReadingVectorSet(vectors={5: np.array([1.0, 0.0]), 2: np.array([0.0, -1.0])})
    assert export_text(readers) == "2 0 -1\n5 1 0\n"
