import pytest

from cot_repe import Pipeline
from cot_repe.enum import StimulusKind
from cot_repe.exceptions import NotEnoughSamples


@pytest.fixture
def pipeline(run_config):
    return Pipeline.from_config(run_config)


def test_pipeline_opens_the_configured_model_and_task(pipeline):
    assert pipeline.runner.model.depth == 3
    assert pipeline.task.name == "coin-parity"
    assert len(pipeline.task) == 24
    assert list(pipeline.layers) == [1, 2, 3]


def test_stimulus_set_starts_at_the_chosen_variant(pipeline):
    stimulus_set = pipeline.stimulus_set(StimulusKind.ZERO_SHOT, stimulus_index=1)
    assert stimulus_set.query_count == 8
    assert stimulus_set.pairs[0].positive.endswith("Let's think about this logically.")

    wrapped = pipeline.stimulus_set(StimulusKind.ZERO_SHOT, stimulus_index=3)
    assert wrapped.pairs[0].positive.endswith("Let's think step by step.")


def test_few_shot_stimulus_set(pipeline):
    stimulus_set = pipeline.stimulus_set(StimulusKind.FEW_SHOT)
    assert stimulus_set.template_id == "few_shot"
    assert stimulus_set.pairs[0].positive.startswith("USER: Q: ")


def test_too_many_samples(run_config):
    pipeline = Pipeline.from_config(run_config.model_copy(update={"n_samples": 25}))
    with pytest.raises(NotEnoughSamples):
        pipeline.stimulus_set()


def test_read_labels_the_variant(pipeline):
    readers = pipeline.read(StimulusKind.FEW_SHOT, stimulus_index=1)
    assert readers.provenance.stimulus_label == "F2"
    assert readers.provenance.model_id == pipeline.runner.model_id
    assert readers.layers == [1, 2, 3]


def test_policy_uses_the_per_task_alpha(pipeline):
    readers = pipeline.read()
    assert pipeline.policy(readers).alpha == pipeline.config.alpha_by_task["coin-parity"]
    assert pipeline.policy(readers, alpha=3.0).alpha == 3.0


def test_localize_accepts_text_or_tokens(pipeline):
    readers = pipeline.read()
    prompt = "USER: Is the coin still heads up?\nASSISTANT:"
    from_text = pipeline.localize(readers, prompt, "So the answer is no.")
    from_tokens = pipeline.localize(readers, prompt, ["So", "the", "answer", "is", "no", "."])
    assert from_text == from_tokens
    assert len(from_text.tokens) == 6


def test_evaluate_fits_readers_per_steered_condition(pipeline, mocker):
    benchmark = mocker.patch("cot_repe.run_benchmark")
    pipeline.evaluate(["base", "cot_z1", "rot_z2"])

    (task, _, conditions), kwargs = benchmark.call_args
    assert len(task) == 4
    assert [condition.name for condition in conditions] == ["base", "cot_z1", "rot_z2"]
    assert list(kwargs["policies"]) == ["rot_z2"]
    assert kwargs["policies"]["rot_z2"].readers.provenance.stimulus_label == "Z2"


def test_evaluate_uses_given_readers(pipeline, mocker):
    readers = pipeline.read()
    benchmark = mocker.patch("cot_repe.run_benchmark")

    pipeline.evaluate(["rot_z1"], readers={"rot_z1": readers})
    assert benchmark.call_args.kwargs["policies"]["rot_z1"].readers is readers
