"""
Contrastive stimulus corpus: positive prompts carry a chain-of-thought stimulus (an instruction or
a demonstration sequence), negative prompts are the same template with the stimulus left out.
"""

from __future__ import annotations

import hashlib
import importlib.resources
from collections.abc import Callable, Sequence
from functools import cache, cached_property

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from cot_repe.config import derive_seed
from cot_repe.enum import SelectionStrategy, StimulusKind
from cot_repe.exceptions import EmptyInput, EmptyPrompt, InsufficientStimuli, InvalidConfig, NotEnoughSamples, UnknownTemplate
from cot_repe.tasks import Demonstration, Task, TaskItem

__all__ = [
    "PromptPair",
    "Stimulus",
    "StimulusSet",
    "Template",
    "build_stimulus_set",
    "bundled_stimuli",
    "get_template",
    "render_prompt",
    "select_queries",
    "shuffle_demonstrations",
]


class Template(BaseModel):
    """
    Prompt layout of one template id.

    Attributes:
        kind (StimulusKind): Form of stimulus the template accepts.
        layout (str): Layout with `{question}`, `{stimulus}` and `{demos}` placeholders.
        stimulus (str | None): Expansion of `{stimulus}` for instructions, with an `{instruction}` placeholder.
        demonstration (str | None): Expansion of one demonstration, with `{q}` and `{a}` placeholders.
        question_cue (str | None): Text placed between the demonstrations and the question.

    """

    kind: StimulusKind = Field(default=..., description="Form of stimulus the template accepts.")
    layout: str = Field(default=..., description="Layout with {question}, {stimulus} and {demos} placeholders.")
    stimulus: str | None = Field(default=None, description="Expansion of {stimulus} for instructions.")
    demonstration: str | None = Field(default=None, description="Expansion of one demonstration.")
    question_cue: str | None = Field(default=None, description="Text between the demonstrations and the question.")


class Stimulus(BaseModel):
    """
    A chain-of-thought stimulus: an instruction (zero-shot) or a demonstration list (few-shot).

    Attributes:
        kind (StimulusKind): Zero-shot or few-shot.
        instruction (str | None): Instruction text of a zero-shot stimulus.
        demonstrations (list[Demonstration] | None): Demonstrations of a few-shot stimulus.
        label (str): Short name used in logs and provenance, e.g. `Z1` or `F2`.
        shuffle_seed (int | None): Seed the demonstrations were permuted with, for shuffled variants.

    """

    kind: StimulusKind = Field(default=..., description="Zero-shot or few-shot.")
    instruction: str | None = Field(default=None, description="Instruction text of a zero-shot stimulus.")
    demonstrations: list[Demonstration] | None = Field(default=None, description="Demonstrations of a few-shot stimulus.")
    label: str = Field(default="", description="Short name used in logs and provenance.")
    shuffle_seed: int | None = Field(default=None, description="Seed the demonstrations were permuted with.")

    @model_validator(mode="after")
    def validate_payload(self) -> Stimulus:
        if self.kind == StimulusKind.ZERO_SHOT and not (self.instruction and self.instruction.strip()):
            raise ValueError("A zero-shot stimulus needs a nonempty instruction")
        if self.kind == StimulusKind.FEW_SHOT and not self.demonstrations:
            raise ValueError("A few-shot stimulus needs at least one demonstration")
        return self

    def for_query(self, query: TaskItem) -> Stimulus:
        """
        The stimulus as rendered for one query.

        A query carrying its own demonstrations replaces a few-shot stimulus's; a shuffled variant
        permutes them with its own seed, so it never collapses into the published order.

        """
        if self.kind != StimulusKind.FEW_SHOT or not query.demonstrations:
            return self
        stimulus = self.model_copy(update={"demonstrations": list(query.demonstrations)})
        if self.shuffle_seed is None:
            return stimulus
        return shuffle_demonstrations(stimulus, self.shuffle_seed)


class PromptPair(BaseModel):
    """
    Positive and negative renderings of one query under one stimulus.

    Attributes:
        query_id (str): Id of the source query.
        stimulus_index (int): Index of the stimulus within the stimulus list.
        positive (str): Prompt with the stimulus.
        negative (str): Prompt without the stimulus.
        template_id (str): Template both prompts were rendered with.

    """

    query_id: str
    stimulus_index: int
    positive: str
    negative: str
    template_id: str

    @property
    def pair_id(self) -> str:
        return f"{self.query_id}/{self.stimulus_index}"


class StimulusSet(BaseModel):
    """
    The contrastive corpus: M prompt pairs for each of N queries, ordered by query then stimulus.

    Attributes:
        pairs (list[PromptPair]): All pairs, grouped per query.
        query_count (int): Number of queries N.
        stimuli_count (int): Stimuli per query M.
        template_id (str): Template the pairs were rendered with.
        stimulus_kind (StimulusKind): Form of the stimuli.

    """

    pairs: list[PromptPair]
    query_count: int
    stimuli_count: int
    template_id: str
    stimulus_kind: StimulusKind

    @model_validator(mode="after")
    def validate_counts(self) -> StimulusSet:
        if len(self.pairs) != self.query_count * self.stimuli_count:
            raise ValueError(
                f"{len(self.pairs)} pairs do not match {self.query_count} queries x {self.stimuli_count} stimuli"
            )
        return self

    @cached_property
    def digest(self) -> str:
        """Hex digest over the rendered prompts, in order."""
        hasher = hashlib.blake2b(digest_size=16)
        for pair in self.pairs:
            for text in (pair.pair_id, pair.positive, pair.negative):
                hasher.update(text.encode("utf-8"))
                hasher.update(b"\x00")
        return hasher.hexdigest()


@cache
def _templates() -> dict[str, Template]:
    raw = yaml.safe_load(importlib.resources.files("cot_repe").joinpath("data", "templates.yaml").read_text())
    return {template_id: Template.model_validate(fields) for template_id, fields in raw.items()}


def get_template(template_id: str) -> Template:
    """
    Looks up a template in the bundled registry.

    Raises:
        UnknownTemplate: If the id is not registered.

    """
    try:
        return _templates()[template_id]
    except KeyError:
        raise UnknownTemplate(f"Unknown template '{template_id}'; expected one of {sorted(_templates())}") from None


def render_prompt(template_id: str, stimulus: Stimulus | None, query: str) -> str:
    """
    Expands a template into a prompt.

    Args:
        template_id (str): Registered template id.
        stimulus (Stimulus | None): The stimulus for a positive prompt, or None for a negative one.
        query (str): The question text.

    Returns:
        str: The rendered prompt.

    Raises:
        UnknownTemplate: If the template id is not registered.
        EmptyPrompt: If the query is blank.

    """
    template = get_template(template_id)
    if not query.strip():
        raise EmptyPrompt("Cannot render a prompt for an empty query.")
    if stimulus is not None and stimulus.kind != template.kind:
        raise InvalidConfig(f"Template '{template_id}' takes {template.kind} stimuli, got {stimulus.kind}")

    expanded_stimulus = ""
    demos = ""
    if stimulus is not None and stimulus.kind == StimulusKind.ZERO_SHOT:
        expanded_stimulus = (template.stimulus or " {instruction}").format(instruction=stimulus.instruction)
    elif stimulus is not None:
        demonstration = template.demonstration or "Q: {q}\nA: {a}\n\n"
        demos = "".join(demonstration.format(q=demo.q, a=demo.a) for demo in stimulus.demonstrations)
        demos += template.question_cue or ""

    return template.layout.format(question=query, stimulus=expanded_stimulus, demos=demos)


def shuffle_demonstrations(stimulus: Stimulus, seed: int, label: str | None = None) -> Stimulus:
    """
    Returns a few-shot stimulus with its demonstrations permuted by a seeded generator.

    An identity draw over two or more demonstrations is rotated by one position, so the
    shuffled order always differs from the input order.

    """
    count = len(stimulus.demonstrations)
    order = np.random.default_rng(seed).permutation(count)
    if count > 1 and np.array_equal(order, np.arange(count)):
        order = np.roll(order, 1)
    demonstrations = [stimulus.demonstrations[int(idx)] for idx in order]
    return stimulus.model_copy(
        update={"demonstrations": demonstrations, "label": label or stimulus.label, "shuffle_seed": seed}
    )


@cache
def _instructions() -> tuple[str, ...]:
    raw = yaml.safe_load(importlib.resources.files("cot_repe").joinpath("data", "stimuli.yaml").read_text())
    return tuple(raw["zero_shot"])


def bundled_stimuli(kind: StimulusKind, task: Task | None = None, seed: int = 0) -> list[Stimulus]:
    """
    Returns the bundled stimulus variants of one kind.

    Zero-shot variants are the three instructions Z1-Z3. Few-shot variants are the task's
    demonstrations in published order (F1) and shuffled with `derive_seed(seed, "demo-shuffle")` (F2).

    Args:
        kind (StimulusKind): Zero-shot or few-shot.
        task (Task | None): Task whose demonstrations form the few-shot stimuli.
        seed (int): Root seed.

    Returns:
        list[Stimulus]: The variants, in order.

    """
    if kind == StimulusKind.ZERO_SHOT:
        return [
            Stimulus(kind=kind, instruction=instruction, label=f"Z{idx + 1}")
            for idx, instruction in enumerate(_instructions())
        ]

    if task is None or not task.demonstrations:
        raise InsufficientStimuli("Few-shot stimuli need a task with demonstrations.")
    published = Stimulus(kind=kind, demonstrations=list(task.demonstrations), label="F1")
    return [published, shuffle_demonstrations(published, derive_seed(seed, "demo-shuffle"), label="F2")]


def select_queries(
    task: Task,
    n: int,
    strategy: SelectionStrategy,
    seed: int = 0,
    perplexity: Callable[[str], float] | None = None,
) -> list[TaskItem]:
    """
    Selects the N source queries of a stimulus set.

    Perplexity strategies score the bare question text and take the n lowest or highest, breaking
    ties by query id. The selection is returned in query-id order.

    Args:
        task (Task): The task to select from.
        n (int): Number of queries.
        strategy (SelectionStrategy): `random`, `low_perplexity` or `high_perplexity`.
        seed (int): Seed of the random strategy.
        perplexity (Callable[[str], float] | None): Perplexity of a text; required by the perplexity strategies.

    Returns:
        list[TaskItem]: Exactly n queries, sorted by id.

    Raises:
        NotEnoughSamples: If the task holds fewer than n queries.

    """
    pool = sorted(task.items, key=lambda item: item.id)
    if n > len(pool):
        raise NotEnoughSamples(f"Requested {n} queries but '{task.name}' holds {len(pool)}")
    if n < 1:
        raise InvalidConfig(f"Query count must be positive, got {n}")
    if n == len(pool):
        return pool

    if strategy == SelectionStrategy.RANDOM:
        chosen = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
        selected = [pool[int(idx)] for idx in chosen]
    else:
        if perplexity is None:
            raise InvalidConfig(f"Selection strategy '{strategy}' needs a model to score perplexity")
        scores = {item.id: perplexity(item.question) for item in pool}
        sign = 1.0 if strategy == SelectionStrategy.LOW_PERPLEXITY else -1.0
        selected = sorted(pool, key=lambda item: (sign * scores[item.id], item.id))[:n]

    logger.info(f"Selected {n} of {len(pool)} queries by {strategy}")
    return sorted(selected, key=lambda item: item.id)


def build_stimulus_set(
    queries: Sequence[TaskItem],
    stimuli: Sequence[Stimulus],
    m: int,
    template_id: str,
) -> StimulusSet:
    """
    Renders M prompt pairs per query using the first M stimuli.

    Args:
        queries (Sequence[TaskItem]): Source queries, in the order the pairs should follow.
        stimuli (Sequence[Stimulus]): Available stimuli; a query's own demonstrations replace a few-shot stimulus's.
        m (int): Stimuli per query.
        template_id (str): Template to render with.

    Returns:
        StimulusSet: The corpus, ordered by query then stimulus index.

    Raises:
        InsufficientStimuli: If fewer than m stimuli are provided.

    """
    if len(stimuli) < m:
        raise InsufficientStimuli(f"{len(stimuli)} stimuli provided, {m} needed per query")
    if not queries:
        raise EmptyInput("A stimulus set needs at least one query.")

    kind = get_template(template_id).kind
    pairs = []
    for query in queries:
        negative = render_prompt(template_id, None, query.question)
        for idx, stimulus in enumerate(stimuli[:m]):
            positive = render_prompt(template_id, stimulus.for_query(query), query.question)
            pairs.append(
                PromptPair(
                    query_id=query.id,
                    stimulus_index=idx,
                    positive=positive,
                    negative=negative,
                    template_id=template_id,
                )
            )

    return StimulusSet(
        pairs=pairs,
        query_count=len(queries),
        stimuli_count=m,
        template_id=template_id,
        stimulus_kind=kind,
    )
