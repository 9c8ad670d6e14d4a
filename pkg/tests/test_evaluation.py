import json

import numpy as np
import pytest

from cot_repe.control import SteeringPolicy
from cot_repe.enum import ConditionFamily, TaskKind
from cot_repe.exceptions import EmptyInput, MissingPolicy, TooFewRuns, UnknownCondition
from cot_repe.evaluation import (
    ExtractionTemplate,
    RunRecord,
    accuracy,
    extract_answer,
    is_correct,
    parse_condition,
    regenerate_robustness_table,
    robustness_score,
    round_half_up,
    run_benchmark,
    write_benchmark,
)
from cot_repe.reading import ReadingVectorSet
from cot_repe.tasks import Demonstration, Task, TaskItem


@pytest.mark.parametrize(
    ("response", "kind", "expected"),
    [
        (" Yes.", TaskKind.YES_NO, "yes"),
        (" no, because the coin was flipped", TaskKind.YES_NO, "no"),
        ("NO", TaskKind.YES_NO, "no"),
        (" yes or no? No.", TaskKind.YES_NO, "yes"),
        (" not sure", TaskKind.YES_NO, None),
        ("nobody knows", TaskKind.YES_NO, None),
        ("", TaskKind.YES_NO, None),
        (" (c)", TaskKind.MULTIPLE_CHOICE, "c"),
        (" (B) the river", TaskKind.MULTIPLE_CHOICE, "b"),
        (" E.", TaskKind.MULTIPLE_CHOICE, "e"),
        (" the river bank", TaskKind.MULTIPLE_CHOICE, None),
        (" (f)", TaskKind.MULTIPLE_CHOICE, None),
        (" 42.", TaskKind.NUMBER, "42"),
        (" 1,024 apples", TaskKind.NUMBER, "1024"),
        (" -3 degrees", TaskKind.NUMBER, "-3"),
        (" 3.5 hours", TaskKind.NUMBER, "3.5"),
        (" 12 and then 13", TaskKind.NUMBER, "12"),
        (" twelve", TaskKind.NUMBER, None),
        (" nk.", TaskKind.LETTERS, "nk"),
        ("  LS", TaskKind.LETTERS, "ls"),
        (" 7 letters", TaskKind.LETTERS, "letters"),
        (" ...", TaskKind.LETTERS, None),
        (" … Therefore, the answer (Yes or No) is yes.", TaskKind.YES_NO, "yes"),
        ("It was flipped twice. Therefore, the answer (Yes or No) is No.", TaskKind.YES_NO, "no"),
        ("therefore, the answer (yes or no) is", TaskKind.YES_NO, None),
        ("The answer is 1,234.0", TaskKind.NUMBER, "1234.0"),
        ("5 apples plus 3. Therefore, the answer (arabic numerals) is 8.", TaskKind.NUMBER, "8"),
        (" 0", TaskKind.NUMBER, "0"),
        (" -1,000,000.25 dollars", TaskKind.NUMBER, "-1000000.25"),
        ("A or B. Therefore, among A through E, the answer is (d).", TaskKind.MULTIPLE_CHOICE, "d"),
        ("Therefore, among A through E, the answer is C", TaskKind.MULTIPLE_CHOICE, "c"),
        ("Elon Musk. Therefore, the answer is nk.", TaskKind.LETTERS, "nk"),
    ],
)
def test_extract_answer(response, kind, expected):
    assert extract_answer(response, kind) == expected


def test_extraction_templates_carry_the_trigger_phrases():
    assert ExtractionTemplate.for_kind(TaskKind.NUMBER).trigger == "Therefore, the answer (arabic numerals) is"
    assert ExtractionTemplate.for_kind(TaskKind.YES_NO).trigger == "Therefore, the answer (Yes or No) is"
    template = ExtractionTemplate.for_kind(TaskKind.MULTIPLE_CHOICE)
    assert extract_answer(" (d)", template) == "d"


@pytest.mark.parametrize(
    ("extracted", "gold", "kind", "expected"),
    [
        ("8", "8.0", TaskKind.NUMBER, True),
        ("1024", "1,024", TaskKind.NUMBER, True),
        ("7", "8", TaskKind.NUMBER, False),
        ("yes", "Yes", TaskKind.YES_NO, True),
        ("no", "yes", TaskKind.YES_NO, False),
        ("c", "(C)", TaskKind.MULTIPLE_CHOICE, True),
        ("nk", "nk", TaskKind.LETTERS, True),
        (None, "yes", TaskKind.YES_NO, False),
    ],
)
def test_is_correct(extracted, gold, kind, expected):
    assert is_correct(extracted, gold, kind) is expected


def _record(correct: bool, extracted: str | None = "yes") -> RunRecord:
    return RunRecord(
        query_id="q", condition="base", response="", answer_text="", extracted=extracted, gold="yes", correct=correct
    )


def test_accuracy():
    assert round_half_up(accuracy([_record(True), _record(False), _record(False)])) == 33.33
    assert accuracy([_record(True)] * 4) == 100.0
    assert _record(False, extracted=None).no_answer
    with pytest.raises(EmptyInput):
        accuracy([])


def test_round_half_up():
    assert round_half_up(2.675) == 2.68
    assert round_half_up(66.665) == 66.67
    assert round_half_up(-0.125) == -0.13
    assert round_half_up(5.0) == 5.0


def test_robustness_score():
    assert round_half_up(robustness_score([26.31, 26.23, 23.58])) == 5.46
    assert round_half_up(robustness_score([26.23, 24.72, 25.09])) == 3.02
    assert robustness_score([45.0, 45.0, 45.0]) == 0.0
    assert robustness_score([10.0, 4.0]) == 6.0
    with pytest.raises(TooFewRuns):
        robustness_score([50.0])


@pytest.mark.parametrize(
    ("text", "name", "family", "variant"),
    [
        ("base", "base", ConditionFamily.BASE, None),
        ("cot_z1", "cot_z1", ConditionFamily.COT_ZERO, 1),
        ("ROT-Z3", "rot_z3", ConditionFamily.ROT_ZERO, 3),
        ("rot_f2", "rot_f2", ConditionFamily.ROT_FEW, 2),
    ],
)
def test_parse_condition(text, name, family, variant):
    condition = parse_condition(text)
    assert (condition.name, condition.family, condition.variant) == (name, family, variant)


@pytest.mark.parametrize("text", ["cot_z4", "cot_f3", "base1", "rot", "cot_z0", "self_consistency"])
def test_unknown_condition(text):
    with pytest.raises(UnknownCondition):
        parse_condition(text)


class ScriptedGenerator:
    """Says "yes" whenever the step-by-step instruction is in the prompt, "no" otherwise."""

    def __init__(self, answer_text: str | None = None) -> None:
        self.answer_text = answer_text
        self.calls = []

    def __call__(self, prompt, max_new_tokens, policy=None):
        self.calls.append((prompt, max_new_tokens, policy))
        if not prompt.endswith("is"):
            return "The coin ends up heads ."
        if self.answer_text is not None:
            return self.answer_text
        return " yes" if "step by step" in prompt else " no"


@pytest.fixture
def task():
    return Task(
        name="coins",
        kind=TaskKind.YES_NO,
        items=[
            TaskItem(id="q3", question="Is the coin heads up?", answer="yes"),
            TaskItem(id="q1", question="Is the coin heads up?", answer="yes"),
            TaskItem(id="q2", question="Is the coin heads up?", answer="no"),
        ],
        demonstrations=[Demonstration(q="Is the coin heads up?", a="It was flipped twice . So the answer is yes .")],
    )


@pytest.fixture
def policy():
    return SteeringPolicy(readers=ReadingVectorSet(vectors={1: np.array([1.0, 0.0])}), alpha=1.0)


def test_benchmark_records_and_summary(task):
    generator = ScriptedGenerator()
    result = run_benchmark(task, generator, ["base", "cot_z1", "cot_z2"], max_new_tokens=16, answer_max_tokens=4)

    assert [record.query_id for record in result.records[:3]] == ["q1", "q2", "q3"]
    assert len(result.records) == 9

    summary = result.summary.set_index("condition")
    assert list(summary.index) == ["base", "cot_z1", "cot_z2", "cot_z"]
    assert summary.loc["base", "accuracy"] == 33.33
    assert summary.loc["cot_z1", "accuracy"] == 66.67
    assert summary.loc["cot_z", "accuracy"] == 50.0
    assert summary.loc["cot_z", "robustness"] == 33.33
    assert summary.loc["cot_z1", "total"] == 3


def test_two_stage_prompts(task):
    generator = ScriptedGenerator()
    run_benchmark(task, generator, ["cot_z1"], max_new_tokens=16, answer_max_tokens=4)

    prompt, budget, _ = generator.calls[0]
    assert prompt == "USER: Is the coin heads up?\nASSISTANT: Let's think step by step."
    assert budget == 16
    second, budget, _ = generator.calls[1]
    assert second == f"{prompt} The coin ends up heads .\nTherefore, the answer (Yes or No) is"
    assert budget == 4


def test_few_shot_prompt_uses_the_task_demonstrations(task):
    generator = ScriptedGenerator()
    run_benchmark(task, generator, ["cot_f1"])
    assert generator.calls[0][0].startswith("USER: Q: Is the coin heads up?\nA: It was flipped twice")


def test_steered_conditions_use_their_policy_in_both_stages(task, policy):
    generator = ScriptedGenerator()
    run_benchmark(task, generator, ["cot_z1", "rot_z1"], policies={"rot_z1": policy})
    steered = [call for call in generator.calls if call[2] is not None]
    assert len(steered) == 6
    assert all(call[2] is policy for call in steered)


def test_steered_condition_without_policy(task):
    with pytest.raises(MissingPolicy):
        run_benchmark(task, ScriptedGenerator(), ["base", "rot_z1"])


def test_unanswered_queries_count_as_incorrect(task):
    result = run_benchmark(task, ScriptedGenerator(answer_text=" I cannot tell ."), ["base"])
    row = result.summary.iloc[0]
    assert row["accuracy"] == 0.0
    assert row["no_answer"] == 3
    assert all(record.no_answer for record in result.records)


def test_benchmark_does_not_depend_on_worker_count(task, policy):
    serial = run_benchmark(task, ScriptedGenerator(), ["cot_z1", "rot_z2"], policies=policy, workers=1)
    pooled = run_benchmark(task, ScriptedGenerator(), ["cot_z1", "rot_z2"], policies=policy, workers=3)
    assert serial.records == pooled.records


def test_write_benchmark(tmp_path, task):
    result = run_benchmark(task, ScriptedGenerator(), ["base", "cot_z1", "cot_z2"])
    summary_path, records_path = write_benchmark(result, tmp_path, stem="coins")

    assert summary_path.name == "coins.summary.jsonl"
    rows = [json.loads(line) for line in summary_path.read_text(encoding="utf-8").splitlines()]
    assert rows[0] == {"condition": "base", "task": "coins", "accuracy": 33.33, "correct": 1, "total": 3, "no_answer": 0}
    assert rows[-1] == {"condition": "cot_z", "task": "coins", "accuracy": 50.0, "robustness": 33.33}

    records = [json.loads(line) for line in records_path.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 9
    assert records[0]["condition"] == "base"


def test_regenerated_robustness_table():
    table = regenerate_robustness_table()
    assert len(table) == 2 * 4 * 6

    cell = table.set_index(["model", "family", "dataset"])
    assert cell.loc[("llama-2-7b-chat", "cot_z", "gsm8k"), "computed"] == 5.46
    assert cell.loc[("llama-2-7b-chat", "rot_z", "gsm8k"), "computed"] == 3.02

    mismatches = table[~table["matches"]]
    assert sorted(zip(mismatches["model"], mismatches["family"], mismatches["dataset"])) == [
        ("llama-3-8b-instruct", "cot_f", "coin_flip"),
        ("llama-3-8b-instruct", "cot_f", "random_letter"),
        ("llama-3-8b-instruct", "cot_f", "strategyqa"),
    ]


def test_shuffled_few_shot_condition_reorders_item_demonstrations(task):
    demonstrations = [Demonstration(q=f"Is coin {n} heads up?", a=f"It was flipped {n} times .") for n in range(3)]
    item = TaskItem(id="q9", question="Is the coin heads up?", answer="yes", demonstrations=demonstrations)
    generator = ScriptedGenerator()
    run_benchmark(task.model_copy(update={"items": [item]}), generator, ["cot_f1", "cot_f2"])

    published, shuffled = (call[0] for call in generator.calls if not call[0].endswith("is"))
    assert published.startswith("USER: Q: Is coin 0 heads up?\nA: It was flipped 0 times .")
    assert published != shuffled
    blocks = [sorted(prompt.removeprefix("USER: ").split("\n\n")[:3]) for prompt in (published, shuffled)]
    assert blocks[0] == blocks[1]
