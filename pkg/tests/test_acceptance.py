"""End-to-end properties of the read, localize and steer workflow."""

import numpy as np
import pytest

from cot_repe import Pipeline
from cot_repe.control import SteeringPolicy, steered_generate
from cot_repe.enum import FinalNorm, SteeringSign
from cot_repe.linalg import cosine, unit
from cot_repe.localization import score_prefixes
from cot_repe.model import build_planted
from cot_repe.reading import ReadingVectorSet, extract_reading_vectors
from cot_repe.runner import ModelRunner
from cot_repe.tokenizer import Tokenizer

PROMPT = "USER: A coin is heads up. Ka flips the coin. Is the coin still heads up?\nASSISTANT:"


def _offset_recovery(as_population, seed: int, noise_scale: float, center: bool = False) -> float:
    """Cosine between a planted direction u and the reader fit on 128 rows of u plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=16)
    noise = rng.normal(size=(128, 16))
    rows = direction + noise_scale * np.linalg.norm(direction) * noise
    readers = extract_reading_vectors(as_population({1: rows}), center=center)
    return cosine(readers.direction(1), direction)


def test_planted_offset_is_recovered_on_almost_every_seed(as_population):
    cosines = [_offset_recovery(as_population, seed, 0.1) for seed in range(100)]
    assert sum(value >= 0.95 for value in cosines) >= 95


def test_recovery_degrades_with_noise(as_population):
    medians = [
        float(np.median([_offset_recovery(as_population, seed, scale) for seed in range(100)]))
        for scale in (0.05, 0.1, 0.2, 0.4)
    ]
    assert medians == sorted(medians, reverse=True)


def test_centering_discards_a_shared_offset(as_population):
    cosines = [abs(_offset_recovery(as_population, seed, 0.1, center=True)) for seed in range(20)]
    assert np.median(cosines) < 0.5


def test_raising_delta_only_adds_negative_tokens(runner, rng):
    readers = ReadingVectorSet(vectors={k: unit(rng.normal(size=16)) for k in (2, 3)})
    response = Tokenizer.split("The coin was flipped once , so it is tails . So the answer is no .")

    previous = set()
    for delta in (-1.0, 0.0, 0.5, 1.0, 1e6):
        scores = score_prefixes(runner, PROMPT, response, readers, delta)
        negative = {i for i, score in enumerate(scores.mean_scores[1:], start=1) if score < 0}
        assert previous <= negative
        previous = negative
    assert len(previous) == len(response)


def test_steering_along_a_planted_direction_produces_the_target(small_config, tokenizer, rng):
    config = small_config.model_copy(update={"final_norm": FinalNorm.IDENTITY})
    direction = unit(rng.normal(size=config.hidden_dim))
    target = tokenizer.token_ids["yes"]
    runner = ModelRunner(build_planted(11, config, layer=3, direction=direction, target_token=target), tokenizer)

    readers = ReadingVectorSet(vectors={3: direction})
    steered = steered_generate(runner, PROMPT, SteeringPolicy(readers=readers, alpha=500.0, sign=SteeringSign.POSITIVE), 3)
    assert steered.tokens == [target] * 3

    plain = runner.generate(PROMPT, 3)
    assert plain.tokens != steered.tokens


def test_target_rank_improves_with_alpha_on_a_planted_model(small_config, tokenizer, rng):
    config = small_config.model_copy(update={"final_norm": FinalNorm.IDENTITY})
    direction = unit(rng.normal(size=config.hidden_dim))
    target = tokenizer.token_ids["yes"]
    model = build_planted(11, config, layer=3, direction=direction, target_token=target)
    runner = ModelRunner(model, tokenizer)
    readers = ReadingVectorSet(vectors={3: direction})

    base = runner.generate(PROMPT, 1).step_logits[0]
    ranks = []
    for alpha in (0.0, 0.5, 1.0, 2.0):
        policy = SteeringPolicy(readers=readers, alpha=alpha, sign=SteeringSign.POSITIVE)
        logits = steered_generate(runner, PROMPT, policy, 1).result.step_logits[0]
        assert logits[target] - base[target] == pytest.approx(alpha * model.planted.slope, abs=1e-9)
        ranks.append(int((logits > logits[target]).sum()))
    assert ranks == sorted(ranks, reverse=True)


def test_pipeline_is_deterministic_across_worker_counts(run_config):
    results = []
    for workers in (1, 2):
        pipeline = Pipeline.from_config(run_config.model_copy(update={"workers": workers}))
        readers = pipeline.read()
        benchmark = pipeline.evaluate(["base", "rot_z1"], readers={"rot_z1": readers})
        results.append((readers, benchmark))

    (serial_readers, serial), (pooled_readers, pooled) = results
    for k in serial_readers.layers:
        np.testing.assert_array_equal(serial_readers.direction(k), pooled_readers.direction(k))
    assert serial.records == pooled.records
    assert serial.summary.equals(pooled.summary)


def test_pipeline_localizes_its_own_generation(run_config):
    pipeline = Pipeline.from_config(run_config)
    readers = pipeline.read()
    report = pipeline.localize(readers, PROMPT)
    assert 1 <= len(report.tokens) <= run_config.max_new_tokens
    assert report.layers == list(pipeline.layers)
