
import numpy as np
import pytest

from cot_repe.config import RunConfig
from cot_repe.enum import StimulusKind
from cot_repe.model import ModelConfig, build
from cot_repe.populations import PopulationSet
from cot_repe.runner import ModelRunner
from cot_repe.tokenizer import Tokenizer


@pytest.fixture(scope="session")
def tokenizer() -> Tokenizer:
    return Tokenizer.bundled()


@pytest.fixture(scope="session")
def small_config(tokenizer) -> ModelConfig:
    return ModelConfig(layer_count=3, hidden_dim=16, head_count=2, vocab_size=tokenizer.size, max_positions=512)


@pytest.fixture(scope="session")
def small_model(small_config):
    return build(7, small_config)


@pytest.fixture(scope="session")
def runner(small_model, tokenizer) -> ModelRunner:
    return ModelRunner(small_model, tokenizer)


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    """Toy settings cut down further so a whole pipeline runs in a few seconds."""
    return RunConfig.from_sources(
        flags={
            "layer_count": 3,
            "hidden_dim": 16,
            "head_count": 2,
            "n_samples": 8,
            "task_size": 24,
            "eval_limit": 4,
            "max_new_tokens": 6,
            "answer_max_tokens": 2,
            "workers": 1,
            "out": tmp_path / "out",
        },
        env={},
        config_file="toy",
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def make_population():
    """Builds a population whose difference rows are positive multiples of `direction` plus Gaussian noise."""

    def _make(
        direction: np.ndarray,
        rows: int,
        sigma: float,
        rng: np.random.Generator,
        layers: tuple[int, ...] = (1,),
    ) -> PopulationSet:
        differences, positives, negatives = {}, {}, {}
        for k in layers:
            magnitudes = rng.uniform(0.5, 3.0, size=rows)
            noise = rng.normal(scale=sigma, size=(rows, direction.size))
            negatives[k] = rng.normal(size=(rows, direction.size))
            differences[k] = magnitudes[:, None] * direction + noise
            positives[k] = negatives[k] + differences[k]
        return PopulationSet(
            layers=list(layers),
            differences=differences,
            positives=positives,
            negatives=negatives,
            pair_ids=[f"q{i}/0" for i in range(rows)],
            stimulus_digest="synthetic",
            model_id="synthetic",
            query_count=rows,
            stimuli_count=1,
            stimulus_kind=StimulusKind.ZERO_SHOT,
        )

    return _make


@pytest.fixture
def as_population():
    """Wraps per-layer difference rows into a population whose negative prompts are all zero."""

    def _wrap(differences: dict[int, np.ndarray]) -> PopulationSet:
        layers = sorted(differences)
        rows = differences[layers[0]].shape[0]
        return PopulationSet(
            layers=layers,
            differences=differences,
            positives=dict(differences),
            negatives={k: np.zeros_like(matrix) for k, matrix in differences.items()},
            pair_ids=[f"q{i}/0" for i in range(rows)],
            stimulus_digest="synthetic",
            model_id="synthetic",
            query_count=rows,
            stimuli_count=1,
            stimulus_kind=StimulusKind.ZERO_SHOT,
        )

    return _wrap
