from __future__ import annotations

import importlib.resources
import itertools
import json
import math
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from decimal import ROUND_HALF_UP, Decimal
from functools import cache
from pathlib import Path
from typing import Protocol

import pandas as pd
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cot_repe.control import SteeringPolicy, steered_generate
from cot_repe.enum import ConditionFamily, StimulusKind, TaskKind
from cot_repe.exceptions import EmptyInput, IoFailure, MissingPolicy, TooFewRuns, UnknownCondition
from cot_repe.runner import ModelRunner
from cot_repe.stimuli import Stimulus, bundled_stimuli, render_prompt
from cot_repe.tasks import Task, TaskItem

__all__ = [
    "BenchmarkResult",
    "Condition",
    "ExtractionTemplate",
    "RunRecord",
    "TextGenerator",
    "ToyTextGenerator",
    "accuracy",
    "extract_answer",
    "is_correct",
    "parse_condition",
    "regenerate_robustness_table",
    "robustness_score",
    "round_half_up",
    "run_benchmark",
    "write_benchmark",
]

_PATTERNS = {
    TaskKind.YES_NO: re.compile(r"\b(yes|no)\b", re.IGNORECASE),
    TaskKind.MULTIPLE_CHOICE: re.compile(r"\(([a-eA-E])\)|\b([A-E])\b"),
    TaskKind.NUMBER: re.compile(r"-?\d[\d,]*(?:\.\d+)?"),
    TaskKind.LETTERS: re.compile(r"[A-Za-z]+"),
}

# Number of prompt variants per condition family
_VARIANTS = {
    ConditionFamily.COT_ZERO: 3,
    ConditionFamily.ROT_ZERO: 3,
    ConditionFamily.COT_FEW: 2,
    ConditionFamily.ROT_FEW: 2,
}


@cache
def _triggers() -> dict[str, str]:
    return yaml.safe_load(importlib.resources.files("cot_repe").joinpath("data", "extraction.yaml").read_text())


class ExtractionTemplate(BaseModel):
    """
    Second-stage answer extraction for one answer format.

    Attributes:
        task_kind (TaskKind): Answer format; selects the parse rule.
        trigger (str): Phrase appended after the reasoning response before the answer is generated.

    """

    task_kind: TaskKind = Field(default=..., description="Answer format; selects the parse rule.")
    trigger: str = Field(default=..., min_length=1, description="Phrase appended before the answer is generated.")

    @classmethod
    def for_kind(cls, kind: TaskKind) -> ExtractionTemplate:
        """The bundled trigger phrase of an answer format."""
        return cls(task_kind=kind, trigger=_triggers()[TaskKind(kind).value])


def extract_answer(response: str, template: ExtractionTemplate | TaskKind) -> str | None:
    """
    Extracts a normalized answer from generated text.

    When the response echoes the trigger phrase, only the text after its last occurrence is parsed.
    `yes_no` takes the first "yes" or "no"; `multiple_choice` the first "(a)".."(e)" or bare
    capital A-E; `number` the first numeral, commas stripped; `letters` the first alphabetic run.
    Answers are lowercased and trimmed.

    Args:
        response (str): Text generated after the trigger phrase.
        template (ExtractionTemplate | TaskKind): Extraction template, or just its answer format.

    Returns:
        str | None: The answer, or None when nothing matches.

    """
    if not isinstance(template, ExtractionTemplate):
        template = ExtractionTemplate.for_kind(template)
    kind = template.task_kind
    echoes = list(re.finditer(re.escape(template.trigger), response, re.IGNORECASE))
    if echoes:
        response = response[echoes[-1].end() :]
    match = _PATTERNS[kind].search(response)
    if match is None:
        return None

    if kind == TaskKind.MULTIPLE_CHOICE:
        answer = match.group(1) or match.group(2)
    elif kind == TaskKind.NUMBER:
        answer = match.group(0).replace(",", "")
    else:
        answer = match.group(0)
    return answer.strip().lower()


def is_correct(extracted: str | None, gold: str, kind: TaskKind) -> bool:
    """
    Compares an extracted answer with the gold answer, which is normalized by the same rule.

    Numbers compare by value, so "8" equals "8.0". A missing answer is incorrect.

    """
    if extracted is None:
        return False
    expected = extract_answer(gold, kind) or gold.strip().lower()
    if kind == TaskKind.NUMBER:
        try:
            return float(extracted) == float(expected)
        except ValueError:
            return extracted == expected
    return extracted == expected


class RunRecord(BaseModel):
    """
    One query answered under one condition.

    Attributes:
        query_id (str): Id of the query.
        condition (str): Condition name, e.g. `cot_z1`.
        response (str): Reasoning response (first stage).
        answer_text (str): Text generated after the trigger phrase (second stage).
        extracted (str | None): Extracted answer, None when nothing matched.
        gold (str): Gold answer.
        correct (bool): Whether the extracted answer matches the gold answer.

    """

    query_id: str
    condition: str
    response: str
    answer_text: str
    extracted: str | None
    gold: str
    correct: bool

    @property
    def no_answer(self) -> bool:
        return self.extracted is None


def round_half_up(value: float, places: int = 2) -> float:
    """Rounds half away from zero at `places` decimals, for reporting."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def accuracy(records: Sequence[RunRecord]) -> float:
    """
    Unrounded percentage of correct records; round with `round_half_up` for reporting.

    Raises:
        EmptyInput: If there are no records.

    """
    if not records:
        raise EmptyInput
    return 100.0 * sum(record.correct for record in records) / len(records)


def robustness_score(accuracies: Sequence[float]) -> float:
    """
    Sum of absolute pairwise differences between the accuracies of prompt variants.

    Lower is more robust; zero iff every accuracy is equal.

    Raises:
        TooFewRuns: If fewer than two accuracies are given.

    """
    if len(accuracies) < 2:
        raise TooFewRuns
    return math.fsum(abs(a - b) for a, b in itertools.combinations(accuracies, 2))


class Condition(BaseModel):
    """
    A benchmark condition: a prompt family and, except for `base`, a variant index.

    Attributes:
        name (str): Canonical name, e.g. `rot_z2`.
        family (ConditionFamily): Prompt family.
        variant (int | None): 1-based variant (instruction Z1-Z3 or demonstration order F1-F2).

    """

    name: str
    family: ConditionFamily
    variant: int | None = None

    @property
    def steered(self) -> bool:
        return self.family in (ConditionFamily.ROT_ZERO, ConditionFamily.ROT_FEW)

    @property
    def stimulus_kind(self) -> StimulusKind | None:
        if self.family in (ConditionFamily.COT_ZERO, ConditionFamily.ROT_ZERO):
            return StimulusKind.ZERO_SHOT
        if self.family in (ConditionFamily.COT_FEW, ConditionFamily.ROT_FEW):
            return StimulusKind.FEW_SHOT
        return None


def parse_condition(text: str) -> Condition:
    """
    Parses `base`, `cot_z1`..`cot_z3`, `rot_z1`..`rot_z3`, `cot_f1`..`cot_f2` or `rot_f1`..`rot_f2`.

    Raises:
        UnknownCondition: If the text names no condition.

    """
    match = re.fullmatch(r"(base|cot_z|rot_z|cot_f|rot_f)(\d+)?", text.strip().lower().replace("-", "_"))
    if match is None:
        raise UnknownCondition(f"Unknown condition '{text}'")

    family = ConditionFamily(match.group(1))
    variant = int(match.group(2)) if match.group(2) else None
    if family == ConditionFamily.BASE:
        if variant is not None:
            raise UnknownCondition(f"Condition 'base' takes no variant, got '{text}'")
        return Condition(name="base", family=family)
    if variant is None or not 1 <= variant <= _VARIANTS[family]:
        raise UnknownCondition(f"Condition '{text}' needs a variant in 1..{_VARIANTS[family]}")
    return Condition(name=f"{family.value}{variant}", family=family, variant=variant)


class TextGenerator(Protocol):
    """Produces a greedy continuation of a prompt, optionally under a steering policy."""

    def __call__(self, prompt: str, max_new_tokens: int, policy: SteeringPolicy | None = None) -> str: ...


class ToyTextGenerator:
    """`TextGenerator` over the toy transformer."""

    def __init__(self, runner: ModelRunner) -> None:
        self.runner = runner

    def __call__(self, prompt: str, max_new_tokens: int, policy: SteeringPolicy | None = None) -> str:
        if policy is None:
            return self.runner.complete(prompt, max_new_tokens)
        return steered_generate(self.runner, prompt, policy, max_new_tokens).text


class BenchmarkResult(BaseModel):
    """Records of a benchmark run and the summary aggregated from them."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: str
    records: list[RunRecord]
    summary: pd.DataFrame


def _condition_stimulus(condition: Condition, task: Task, seed: int) -> Stimulus | None:
    if condition.stimulus_kind is None:
        return None
    return bundled_stimuli(condition.stimulus_kind, task, seed)[condition.variant - 1]


def _condition_prompt(condition: Condition, stimulus: Stimulus | None, item: TaskItem) -> str:
    if stimulus is None:
        return render_prompt(StimulusKind.ZERO_SHOT.value, None, item.question)
    return render_prompt(stimulus.kind.value, stimulus.for_query(item), item.question)


def _summarize(task: str, conditions: list[Condition], records: list[RunRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([record.model_dump() for record in records])
    frame["no_answer"] = frame["extracted"].isna()
    per_condition = frame.groupby("condition", sort=False).agg(
        correct=("correct", "sum"),
        total=("correct", "size"),
        no_answer=("no_answer", "sum"),
    )
    per_condition["accuracy"] = 100.0 * per_condition["correct"] / per_condition["total"]

    rows = []
    for condition in conditions:
        stats = per_condition.loc[condition.name]
        rows.append({
            "condition": condition.name,
            "task": task,
            "accuracy": round_half_up(float(stats["accuracy"])),
            "robustness": None,
            "correct": int(stats["correct"]),
            "total": int(stats["total"]),
            "no_answer": int(stats["no_answer"]),
        })

    families: dict[ConditionFamily, list[float]] = {}
    for condition in conditions:
        if condition.variant is not None:
            families.setdefault(condition.family, []).append(float(per_condition.loc[condition.name, "accuracy"]))
    for family, accuracies in families.items():
        if len(accuracies) < 2:
            continue
        rows.append({
            "condition": family.value,
            "task": task,
            "accuracy": round_half_up(math.fsum(accuracies) / len(accuracies)),
            "robustness": round_half_up(robustness_score(accuracies)),
            "correct": None,
            "total": None,
            "no_answer": None,
        })

    return pd.DataFrame(rows).astype({"correct": "Int64", "total": "Int64", "no_answer": "Int64", "robustness": "Float64"})


def run_benchmark(
    task: Task,
    generator: TextGenerator,
    conditions: Sequence[str | Condition],
    policies: SteeringPolicy | Mapping[str, SteeringPolicy] | None = None,
    kind: TaskKind | None = None,
    max_new_tokens: int = 512,
    answer_max_tokens: int = 8,
    seed: int = 0,
    workers: int = 1,
) -> BenchmarkResult:
    """
    Answers every task item under every condition with two-stage extraction.

    Stage one generates the reasoning response to the condition's prompt; stage two appends a
    newline and the trigger phrase and generates the answer, from which `extract_answer` reads the
    prediction. Steered conditions use their policy in both stages.

    Args:
        task (Task): The task.
        generator (TextGenerator): Text generator.
        conditions (Sequence[str | Condition]): Conditions to run, in summary order.
        policies (SteeringPolicy | Mapping[str, SteeringPolicy] | None): One policy for every steered
            condition, or a policy per steered condition name.
        kind (TaskKind | None): Answer format; defaults to the task's.
        max_new_tokens (int): Budget of the reasoning stage.
        answer_max_tokens (int): Budget of the answer stage.
        seed (int): Root seed (few-shot demonstration shuffling).
        workers (int): Worker threads; records are merged in (condition, query id) order.

    Returns:
        BenchmarkResult: Records and summary; one summary row per condition, plus one per condition
            family with at least two variants (mean accuracy and robustness score).

    Raises:
        MissingPolicy: If a steered condition has no policy.
        UnknownCondition: If a condition cannot be parsed.

    """
    parsed = [c if isinstance(c, Condition) else parse_condition(c) for c in conditions]
    kind = TaskKind(kind or task.kind)
    template = ExtractionTemplate.for_kind(kind)
    items = sorted(task.items, key=lambda item: item.id)
    if not items:
        raise EmptyInput(f"Task '{task.name}' holds no items")

    def policy_for(condition: Condition) -> SteeringPolicy | None:
        if not condition.steered:
            return None
        policy = policies.get(condition.name) if isinstance(policies, Mapping) else policies
        if policy is None:
            raise MissingPolicy(f"Condition '{condition.name}' needs reading vectors and a steering policy")
        return policy

    resolved = {condition.name: policy_for(condition) for condition in parsed}

    records: list[RunRecord] = []
    for condition in parsed:
        policy = resolved[condition.name]
        stimulus = _condition_stimulus(condition, task, seed)

        def answer(item: TaskItem, condition: Condition = condition, policy=policy, stimulus=stimulus) -> RunRecord:
            prompt = _condition_prompt(condition, stimulus, item)
            response = generator(prompt, max_new_tokens, policy)
            answer_text = generator(f"{prompt} {response}\n{template.trigger}", answer_max_tokens, policy)
            extracted = extract_answer(answer_text, template)
            if extracted is None:
                logger.warning(f"[{condition.name}] No answer extracted for '{item.id}'")
            return RunRecord(
                query_id=item.id,
                condition=condition.name,
                response=response,
                answer_text=answer_text,
                extracted=extracted,
                gold=item.answer,
                correct=is_correct(extracted, item.answer, kind),
            )

        with ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
            condition_records = list(executor.map(answer, items))

        logger.info(f"[{condition.name}] Accuracy {round_half_up(accuracy(condition_records)):.2f}%")
        records.extend(condition_records)

    return BenchmarkResult(task=task.name, records=records, summary=_summarize(task.name, parsed, records))


def _plain(value):
    return value.item() if hasattr(value, "item") else value


def _jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(row, ensure_ascii=False) + "\n" for row in rows)


def write_benchmark(result: BenchmarkResult, out_dir: str | Path, stem: str = "benchmark") -> tuple[Path, Path]:
    """
    Writes the summary and the record log as JSON lines.

    Summary rows are `{condition, task, accuracy, robustness?, correct?, total?, no_answer?}`, keys
    omitted when empty; record rows follow `RunRecord`.

    Returns:
        tuple[Path, Path]: Paths of the summary and the record log.

    """
    out_dir = Path(out_dir)
    summary_path = out_dir / f"{stem}.summary.jsonl"
    records_path = out_dir / f"{stem}.records.jsonl"

    summary_rows = [
        {key: _plain(value) for key, value in row.items() if pd.notna(value)}
        for row in result.summary.to_dict(orient="records")
    ]
    record_rows = [record.model_dump() for record in result.records]

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path.write_text(_jsonl(summary_rows), encoding="utf-8")
        records_path.write_text(_jsonl(record_rows), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Could not write benchmark results to '{out_dir}': {exc}") from exc

    logger.info(f"Wrote {len(summary_rows)} summary row(s) and {len(record_rows)} record(s) to '{out_dir}'")
    return summary_path, records_path


@cache
def _robustness_tables() -> dict:
    resource = importlib.resources.files("cot_repe").joinpath("data", "robustness", "tables.yaml")
    return yaml.safe_load(resource.read_text())


def regenerate_robustness_table(tolerance: float = 0.01) -> pd.DataFrame:
    """
    Recomputes every published robustness score from the published variant accuracies.

    Returns:
        pd.DataFrame: One row per (model, family, dataset) with the published and recomputed
            scores and whether they agree within `tolerance`.

    """
    tables = _robustness_tables()
    rows = []
    for model, families in tables["variants"].items():
        for family, datasets in families.items():
            for dataset in tables["datasets"]:
                accuracies = datasets[dataset]
                computed = robustness_score(accuracies)
                published = float(tables["scores"][model][family][dataset])
                rows.append({
                    "model": model,
                    "family": family,
                    "dataset": dataset,
                    "published": published,
                    "computed": round_half_up(computed),
                    "matches": abs(computed - published) <= tolerance + 1e-9,
                })

    frame = pd.DataFrame(rows)
    mismatches = frame[~frame["matches"]]
    for row in mismatches.itertuples():
        logger.warning(f"[{row.model} {row.family} {row.dataset}] Published {row.published:.2f}, recomputed {row.computed:.2f}")
    return frame
